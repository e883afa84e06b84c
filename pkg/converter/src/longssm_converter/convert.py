"""Convert checkpoints to manifest directories and verify logits parity."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from longssm import LayerWeights, ModelBundle, forward, load_model, save_model

from .layout import apply_rule, build_conversion_map, infer_config
from .readers import CheckpointError, read_checkpoint

__all__ = ["ConversionReport", "convert", "verify"]


@dataclass(frozen=True)
class ConversionReport:
    out_dir: Path
    rules: tuple
    shapes: dict[str, tuple[int, ...]]

    def print_shapes(self):
        print(f"wrote manifest to {self.out_dir}")
        for rule in self.rules:
            print(f"  {rule.describe():70s} {self.shapes[rule.target]}")


def convert(
    checkpoint_path,
    out_dir,
    train_length: int = 2048,
    tie_embeddings: bool | None = None,
) -> ConversionReport:
    """Export a Mamba-1 checkpoint as a manifest directory.

    The result is validated with the primary loader before returning, so a
    returned report implies a loadable model. Re-running over the same
    checkpoint rewrites byte-identical output.
    """
    sd, hf_config = read_checkpoint(checkpoint_path)
    cfg, tie = infer_config(sd, hf_config, train_length=train_length,
                            tie_embeddings=tie_embeddings)
    cmap = build_conversion_map(sd, cfg, tie)
    tensors = {rule.target: apply_rule(rule, sd) for rule in cmap.rules}

    layers = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        layers.append(
            LayerWeights(
                in_proj=tensors[p + "in_proj"],
                gate_proj=tensors[p + "gate_proj"],
                out_proj=tensors[p + "out_proj"],
                bc_proj=tensors[p + "bc_proj"],
                conv_weight=tensors[p + "conv_weight"],
                conv_bias=tensors[p + "conv_bias"],
                a=tensors[p + "a"],
                d=tensors[p + "d"],
                norm=tensors[p + "norm"],
                delta_down=tensors[p + "delta_down"],
                delta_up=tensors[p + "delta_up"],
                delta_bias=tensors[p + "delta_bias"],
            )
        )
    embedding = tensors["embedding"]
    bundle = ModelBundle(
        config=cfg,
        embedding=embedding,
        layers=layers,
        final_norm=tensors["final_norm"],
        lm_head=embedding if tie else tensors["lm_head"],
    )
    out_dir = Path(out_dir)
    save_model(bundle, out_dir)
    load_model(out_dir)  # enforce the primary loader's validation rules
    shapes = {name: tuple(arr.shape) for name, arr in tensors.items()}
    return ConversionReport(out_dir=out_dir, rules=cmap.rules, shapes=shapes)


def _reference_logits(checkpoint_path, tokens) -> np.ndarray | None:
    path = Path(checkpoint_path)
    if path.is_dir() and (path / "manifest.json").exists():
        return forward(load_model(path), tokens)
    if path.is_dir() and (path / "config.json").exists():
        try:
            import torch
            from transformers import MambaForCausalLM
        except ImportError:
            return None
        model = MambaForCausalLM.from_pretrained(str(path))
        model.eval()
        with torch.no_grad():
            out = model(input_ids=torch.as_tensor(np.asarray(tokens))[None, :])
        return out.logits[0].to(torch.float32).numpy()
    return None


def verify(manifest_dir, checkpoint_path, n_tokens: int = 32) -> dict:
    """Compare manifest-forward logits against a source-ecosystem reference.

    The reference is a Hugging Face forward for HF directories, or the
    primary runtime itself when the checkpoint is another manifest
    directory. Advisory: returns a report, never raises on deviation.
    """
    bundle = load_model(manifest_dir)
    tokens = np.arange(n_tokens, dtype=np.int64) % bundle.config.vocab_size
    reference = _reference_logits(checkpoint_path, tokens)
    if reference is None:
        return {
            "status": "skipped",
            "notice": f"no reference forward available for {checkpoint_path}",
            "n_tokens": n_tokens,
        }
    ours = forward(bundle, tokens)
    deviation = float(np.abs(ours - reference).max())
    return {"status": "compared", "max_abs_deviation": deviation, "n_tokens": n_tokens}
