"""Command-line pipeline: analyze, classify, calibrate, eval-ppl,
eval-passkey, generate, synth.

Every subcommand reads an optional JSON config file (--config); config keys
equal flag names with dashes replaced by underscores, and explicit flags win
over file values. All outputs carry a provenance block (JSON) or ``#``
comment header (CSV) recording the resolved configuration. Exit codes:
0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attention import attention_scores, decay_curve, export_heatmap, receptive_field
from .channels import THETA_GRID, ThresholdTable, classify_channels
from .evalharness import PasskeyConfig, PasskeyReport, emit_report, gen_passkey, perplexity, score_passkey
from .manifest import ManifestError, ModelConfig, load_model, save_model
from .pipeline import calibrate, classify_layers
from .runtime import RunMode, RunModeError, forward, generate_greedy
from .ssm import NumericsError
from .synth import DeltaProfile, synth_model
from .tokens import TokenStreamError, read_tokens, write_tokens

DEFAULTS = {
    "mode": "vanilla",
    "theta": 5e-2,          # alternate family default: 1e-30
    "clamp_percent": 5.0,   # alternate family default: 20
    "interval": 1000,
    "s_max": 16000,
    "epsilon": 1e-3,
    "seed": 0,
    "format": "csv",
    "layer": 0,
    "n_new": 32,
    "n_instances": 10,
    "key_length": 4,
    "global_fraction": 0.25,
    "vocab_size": 256,
    "d_model": 32,
    "d_inner": 64,
    "d_state": 4,
    "n_layers": 1,
    "train_length": 512,
    "conv_kernel": 4,
    "delta_mean": 50.0 / 512.0,
    "delta_spread": 3.0,
    "svg": False,
    "sweep": False,
    "lengths": "512",
    "channels": "",
}


class ConfigError(ValueError):
    """Bad flag/config combination."""


def _add_common(p):
    p.add_argument("--config", help="JSON config file; flags override its keys")
    p.add_argument("--out", help="output directory or file")
    p.add_argument("--seed", type=int)
    p.add_argument("--format", choices=["csv", "json"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="longssm",
        description="Selective-SSM inference and long-context channel analysis toolkit",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="attention maps, receptive fields, decay curves")
    p.add_argument("--model", help="model manifest directory")
    p.add_argument("--tokens", nargs="+", help="token stream file(s)")
    p.add_argument("--layer", type=int)
    p.add_argument("--channels", help="comma-separated channel ids; empty = all")
    p.add_argument("--epsilon", type=float, help="receptive-field significance threshold")
    p.add_argument("--svg", action="store_true", default=None, help="also write SVG heatmaps")
    _add_common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("classify", help="label channels global/local per layer")
    p.add_argument("--model")
    p.add_argument("--tokens", nargs="+")
    p.add_argument("--theta", type=float)
    p.add_argument("--sweep", action="store_true", default=None,
                   help="also report counts over the default threshold grid")
    _add_common(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("calibrate", help="build the per-channel threshold table")
    p.add_argument("--model")
    p.add_argument("--tokens", nargs="+", help="calibration streams (typically 5)")
    p.add_argument("--theta", type=float)
    p.add_argument("--clamp-percent", type=float)
    p.add_argument("--interval", type=int)
    p.add_argument("--s-max", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval-ppl", help="perplexity versus sequence length")
    p.add_argument("--model")
    p.add_argument("--tokens", nargs="+")
    p.add_argument("--mode", choices=["vanilla", "longmamba"])
    p.add_argument("--table", help="threshold table (longmamba mode)")
    p.add_argument("--lengths", help="comma-separated window lengths")
    _add_common(p)
    p.set_defaults(func=cmd_eval_ppl)

    p = sub.add_parser("eval-passkey", help="passkey retrieval mechanics")
    p.add_argument("--model")
    p.add_argument("--mode", choices=["vanilla", "longmamba"])
    p.add_argument("--table")
    p.add_argument("--lengths")
    p.add_argument("--n-instances", type=int)
    p.add_argument("--key-length", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_eval_passkey)

    p = sub.add_parser("generate", help="greedy decoding from a prompt stream")
    p.add_argument("--model")
    p.add_argument("--tokens", nargs="+", help="prompt stream file")
    p.add_argument("--mode", choices=["vanilla", "longmamba"])
    p.add_argument("--table")
    p.add_argument("--n-new", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("synth", help="generate a model with planted channel populations")
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--d-model", type=int)
    p.add_argument("--d-inner", type=int)
    p.add_argument("--d-state", type=int)
    p.add_argument("--n-layers", type=int)
    p.add_argument("--train-length", type=int)
    p.add_argument("--conv-kernel", type=int)
    p.add_argument("--global-fraction", type=float)
    p.add_argument("--delta-mean", type=float)
    p.add_argument("--delta-spread", type=float)
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge defaults, config-file values, and explicit flags (flags win)."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        file_cfg = json.loads(path.read_text())
        unknown = set(file_cfg) - set(DEFAULTS) - {"model", "tokens", "table", "out"}
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update(file_cfg)
    for key, value in vars(args).items():
        if key in ("config", "command", "func"):
            continue
        if value is not None:
            cfg[key] = value
    return cfg


def _provenance(cfg: dict, keys, **extra) -> dict:
    prov = {"tool": f"longssm {__version__}"}
    for k in keys:
        prov[k] = cfg.get(k)
    prov.update(extra)
    return prov


def _require(cfg: dict, *keys):
    for k in keys:
        if not cfg.get(k):
            raise ConfigError(f"--{k.replace('_', '-')} is required for this command")


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg.get("out") or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_ints(text: str) -> list[int]:
    return [int(tok) for tok in str(text).split(",") if tok.strip() != ""]


def _load_streams(cfg: dict) -> list[np.ndarray]:
    return [read_tokens(p) for p in cfg["tokens"]]


def _stream_hashes(cfg: dict) -> list[str]:
    return [hashlib.sha256(Path(p).read_bytes()).hexdigest()[:16] for p in cfg["tokens"]]


def _run_mode(cfg: dict) -> RunMode:
    if cfg["mode"] == "vanilla":
        return RunMode("vanilla")
    if not cfg.get("table"):
        raise ConfigError("--mode longmamba requires --table")
    table = ThresholdTable.load(cfg["table"])
    return RunMode("longmamba", table=table)


def cmd_analyze(cfg: dict) -> int:
    _require(cfg, "model", "tokens")
    from .runtime import trace_ssm_inputs

    bundle = load_model(cfg["model"])
    stream = _load_streams(cfg)[0]
    layer = int(cfg["layer"])
    if not 0 <= layer < bundle.config.n_layers:
        raise ConfigError(f"layer {layer} out of range")
    channels = _parse_ints(cfg["channels"]) or list(range(bundle.config.d_inner))
    for ch in channels:
        if not 0 <= ch < bundle.config.d_inner:
            raise ConfigError(f"channel {ch} out of range")
    epsilon = float(cfg["epsilon"])

    _, inputs = trace_ssm_inputs(bundle, stream)
    ins = inputs[layer]
    a = bundle.layers[layer].a
    out = _out_dir(cfg)
    prov = _provenance(cfg, ["model", "layer", "epsilon"], stream_hash=_stream_hashes(cfg)[0])

    slices = attention_scores(ins, a, channels=channels, layer=layer)
    rf_lines = ["# " + json.dumps(prov), "channel,i,span"]
    for sl in slices:
        export_heatmap(sl, out / f"attention_layer{layer}_ch{sl.channel}.csv",
                       svg=bool(cfg["svg"]))
        prof = receptive_field(sl, epsilon)
        for i, span in zip(prof.rows, prof.span):
            rf_lines.append(f"{sl.channel},{i},{span}")
    (out / f"receptive_field_layer{layer}.csv").write_text("\n".join(rf_lines) + "\n")

    decay_lines = ["# " + json.dumps(prov), "channel,t,value,log_value"]
    for ch in channels:
        curve = decay_curve(ins.delta, a, ch, layer=layer)
        for t in range(len(curve.values)):
            decay_lines.append(f"{ch},{t},{float(curve.values[t])!r},{float(curve.log_values[t])!r}")
    (out / f"decay_layer{layer}.csv").write_text("\n".join(decay_lines) + "\n")
    print(f"wrote {len(slices)} attention map(s) to {out}")
    return 0


def cmd_classify(cfg: dict) -> int:
    _require(cfg, "model", "tokens")
    bundle = load_model(cfg["model"])
    streams = _load_streams(cfg)
    theta = float(cfg["theta"])
    if theta <= 0:
        raise ConfigError("--theta must be positive")
    classifications = classify_layers(bundle, streams, theta)
    out = _out_dir(cfg)
    prov = _provenance(cfg, ["model", "theta"], stream_hashes=_stream_hashes(cfg))

    doc = {
        "provenance": prov,
        "layers": [
            {
                "layer": c.layer,
                "theta": c.theta,
                "train_length": c.train_length,
                "n_global": c.n_global,
                "n_local": c.n_local,
                "labels": c.label_names(),
                "decay": [float(v) for v in c.decay_at_train_len],
            }
            for c in classifications
        ],
    }
    if cfg["sweep"]:
        doc["sweep"] = [
            {
                "theta": theta_value,
                "n_global_per_layer": [
                    classify_channels(
                        c.decay_at_train_len, theta_value, log_decay=c.log_decay
                    ).n_global
                    for c in classifications
                ],
            }
            for theta_value in THETA_GRID
        ]
    (out / "classification.json").write_text(json.dumps(doc, indent=2) + "\n")

    csv_lines = ["# " + json.dumps(prov), "layer,n_global,n_local"]
    csv_lines += [f"{c.layer},{c.n_global},{c.n_local}" for c in classifications]
    (out / "classification.csv").write_text("\n".join(csv_lines) + "\n")
    for c in classifications:
        print(f"layer {c.layer}: {c.n_global} global / {c.n_local} local")
    return 0


def cmd_calibrate(cfg: dict) -> int:
    _require(cfg, "model", "tokens")
    bundle = load_model(cfg["model"])
    streams = _load_streams(cfg)
    train_len = bundle.config.train_length
    for i, s in enumerate(streams):
        if len(s) < train_len:
            raise ValueError(
                f"calibration stream {i} has {len(s)} tokens; training length is {train_len}"
            )
    streams = [s[:train_len] for s in streams]
    table, classifications = calibrate(
        bundle,
        streams,
        theta=float(cfg["theta"]),
        clamp_percent=float(cfg["clamp_percent"]),
        s_max=int(cfg["s_max"]),
        interval=int(cfg["interval"]),
    )
    out = _out_dir(cfg)
    doc = table.to_json_dict()
    doc["provenance"] = _provenance(
        cfg,
        ["model", "theta", "clamp_percent", "interval", "s_max", "seed"],
        stream_hashes=_stream_hashes(cfg),
        n_global_per_layer=[c.n_global for c in classifications],
    )
    path = out / "threshold_table.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    print(f"wrote {path}")
    return 0


def cmd_eval_ppl(cfg: dict) -> int:
    _require(cfg, "model", "tokens")
    bundle = load_model(cfg["model"])
    mode = _run_mode(cfg)
    stream = np.concatenate(_load_streams(cfg))
    lengths = _parse_ints(cfg["lengths"])
    if not lengths:
        raise ConfigError("--lengths must name at least one window length")
    report = perplexity(bundle, stream, lengths, mode)
    out = _out_dir(cfg)
    prov = _provenance(cfg, ["model", "mode", "table", "lengths"],
                       stream_hashes=_stream_hashes(cfg))
    path = emit_report(report, out / f"perplexity.{cfg['format']}", cfg["format"], prov)
    for e in report.entries:
        print(f"S={e.length}: ppl={e.perplexity:.4f} over {e.token_count} tokens")
    print(f"wrote {path}")
    return 0


def cmd_eval_passkey(cfg: dict) -> int:
    _require(cfg, "model")
    bundle = load_model(cfg["model"])
    mode = _run_mode(cfg)
    vocab = bundle.config.vocab_size
    if vocab < 32:
        raise ConfigError("passkey task needs vocab_size >= 32")
    key_length = int(cfg["key_length"])
    out = _out_dir(cfg)
    prov = _provenance(cfg, ["model", "mode", "table", "seed", "key_length", "n_instances"])
    for s in _parse_ints(cfg["lengths"]):
        pk_cfg = PasskeyConfig(
            length=s,
            key_length=key_length,
            filler_range=(0, vocab - 17),
            key_range=(vocab - 17, vocab - 1),
            marker_id=vocab - 1,
        )
        exact = 0
        overlap = 0.0
        n = int(cfg["n_instances"])
        for k in range(n):
            instance = gen_passkey(pk_cfg, seed=int(cfg["seed"]) + k)
            toks = generate_greedy(bundle, instance.tokens, key_length, mode)
            score = score_passkey(toks[len(instance.tokens):], instance)
            exact += score["exact"]
            overlap += score["token_overlap"]
        report = PasskeyReport(
            mode=cfg["mode"], length=s, n_instances=n,
            exact_rate=exact / n, mean_overlap=overlap / n,
        )
        path = emit_report(report, out / f"passkey_{s}.{cfg['format']}", cfg["format"], prov)
        print(f"S={s}: exact={report.exact_rate:.3f} overlap={report.mean_overlap:.3f} -> {path}")
    return 0


def cmd_generate(cfg: dict) -> int:
    _require(cfg, "model", "tokens")
    bundle = load_model(cfg["model"])
    mode = _run_mode(cfg)
    prompt = _load_streams(cfg)[0]
    tokens = generate_greedy(bundle, prompt, int(cfg["n_new"]), mode)
    if cfg.get("out"):
        out = Path(cfg["out"])
        if out.suffix:
            out.parent.mkdir(parents=True, exist_ok=True)
            write_tokens(out, tokens)
        else:
            out.mkdir(parents=True, exist_ok=True)
            write_tokens(out / "generated.tokens", tokens)
    print(" ".join(str(t) for t in tokens))
    return 0


def cmd_synth(cfg: dict) -> int:
    _require(cfg, "out")
    config = ModelConfig(
        vocab_size=int(cfg["vocab_size"]),
        d_model=int(cfg["d_model"]),
        d_inner=int(cfg["d_inner"]),
        d_state=int(cfg["d_state"]),
        n_layers=int(cfg["n_layers"]),
        train_length=int(cfg["train_length"]),
        conv_kernel=int(cfg["conv_kernel"]),
    )
    profile = DeltaProfile(mean=float(cfg["delta_mean"]), spread=float(cfg["delta_spread"]))
    bundle, masks = synth_model(
        config, float(cfg["global_fraction"]), profile, seed=int(cfg["seed"])
    )
    out = Path(cfg["out"])
    save_model(bundle, out)
    planted = {
        "provenance": _provenance(
            cfg, ["seed", "global_fraction", "delta_mean", "delta_spread"]
        ),
        "planted_global": [[int(ch) for ch in np.flatnonzero(m)] for m in masks],
    }
    (out / "planted.json").write_text(json.dumps(planted, indent=2) + "\n")
    print(f"wrote synthetic model to {out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        return args.func(cfg)
    except (ConfigError, RunModeError, dataclasses.FrozenInstanceError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ManifestError, TokenStreamError, FileNotFoundError, json.JSONDecodeError,
            ValueError, IndexError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
