"""Command line: convert checkpoints, verify manifests."""

from __future__ import annotations

import argparse
import json
import sys

from longssm import ManifestError

from .convert import convert, verify
from .readers import CheckpointError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="longssm-convert",
        description="Export Mamba-1 checkpoints into the longssm weight-manifest format",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="checkpoint -> manifest directory")
    p.add_argument("--in", dest="checkpoint", required=True,
                   help="checkpoint file (.pt/.bin/.safetensors) or HF model directory")
    p.add_argument("--out", required=True, help="manifest output directory")
    p.add_argument("--tie-embeddings", action="store_true", default=None,
                   help="force head/embedding tying regardless of checkpoint contents")
    p.add_argument("--train-length", type=int, default=2048,
                   help="training context length recorded in the manifest config")

    p = sub.add_parser("verify", help="compare manifest logits against the source")
    p.add_argument("--manifest", required=True)
    p.add_argument("--in", dest="checkpoint", required=True)
    p.add_argument("--tokens", type=int, default=32)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "convert":
            report = convert(
                args.checkpoint,
                args.out,
                train_length=args.train_length,
                tie_embeddings=args.tie_embeddings,
            )
            report.print_shapes()
            return 0
        report = verify(args.manifest, args.checkpoint, args.tokens)
        print(json.dumps(report, indent=2))
        return 0
    except (CheckpointError, ManifestError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
