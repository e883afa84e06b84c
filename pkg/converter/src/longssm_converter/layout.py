"""The Mamba-1 tensor layout and its mapping onto the manifest schema.

Each manifest tensor is produced from exactly one source tensor through a
declared transform chain:

    none                copy
    split-rows          take a contiguous row range of the source
    squeeze-mid         drop a singleton middle axis (depthwise conv weight)
    exp-negate          A stored as log magnitude: materialize -exp(values)
    transpose           swap the two axes

Only this layout is mapped; any other key structure is rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from longssm import ModelConfig

from .readers import CheckpointError

__all__ = ["ConversionRule", "ConversionMap", "infer_config", "build_conversion_map", "apply_rule"]

# The smallest-magnitude replacement when -exp() underflows to -0.0; keeps the
# strict-negativity contract of the manifest format.
A_UNDERFLOW = np.float32(-1e-37)


@dataclass(frozen=True)
class ConversionRule:
    source: str
    target: str
    transforms: tuple[str, ...] = ()
    rows: tuple[int, int] | None = None

    def describe(self) -> str:
        ops = "+".join(self.transforms) if self.transforms else "none"
        rows = f"[{self.rows[0]}:{self.rows[1]}]" if self.rows else ""
        return f"{self.source}{rows} -> {self.target} ({ops})"


@dataclass(frozen=True)
class ConversionMap:
    config: ModelConfig
    rules: tuple[ConversionRule, ...]
    tie_embeddings: bool

    def __post_init__(self):
        targets = [r.target for r in self.rules]
        dupes = {t for t in targets if targets.count(t) > 1}
        if dupes:
            raise CheckpointError(f"multiple sources for manifest tensors: {sorted(dupes)}")


def _embedding_key(sd: dict) -> str:
    for key in ("backbone.embedding.weight", "backbone.embeddings.weight"):
        if key in sd:
            return key
    raise CheckpointError("no embedding tensor found; not a Mamba-1 layout")


def infer_config(
    sd: dict[str, np.ndarray],
    hf_config: dict | None,
    train_length: int = 2048,
    tie_embeddings: bool | None = None,
) -> tuple[ModelConfig, bool]:
    """Model dimensions from the HF config when present, else from shapes."""
    emb = sd[_embedding_key(sd)]
    n_layers = 0
    while f"backbone.layers.{n_layers}.mixer.A_log" in sd:
        n_layers += 1
    if n_layers == 0:
        raise CheckpointError("no backbone.layers.*.mixer tensors; not a Mamba-1 layout")

    if tie_embeddings is None:
        if hf_config is not None and "tie_word_embeddings" in hf_config:
            tie_embeddings = bool(hf_config["tie_word_embeddings"])
        else:
            tie_embeddings = "lm_head.weight" not in sd

    if hf_config is not None:
        cfg = ModelConfig(
            vocab_size=int(hf_config["vocab_size"]),
            d_model=int(hf_config["hidden_size"]),
            d_inner=int(hf_config["intermediate_size"]),
            d_state=int(hf_config["state_size"]),
            n_layers=int(hf_config["num_hidden_layers"]),
            train_length=train_length,
            conv_kernel=int(hf_config["conv_kernel"]),
            dt_rank=int(hf_config["time_step_rank"]),
            tied_embeddings=tie_embeddings,
        )
    else:
        a_log = sd["backbone.layers.0.mixer.A_log"]
        dt_w = sd["backbone.layers.0.mixer.dt_proj.weight"]
        conv_w = sd["backbone.layers.0.mixer.conv1d.weight"]
        cfg = ModelConfig(
            vocab_size=emb.shape[0],
            d_model=emb.shape[1],
            d_inner=a_log.shape[0],
            d_state=a_log.shape[1],
            n_layers=n_layers,
            train_length=train_length,
            conv_kernel=conv_w.shape[-1],
            dt_rank=dt_w.shape[1],
            tied_embeddings=tie_embeddings,
        )
    if emb.shape != (cfg.vocab_size, cfg.d_model):
        raise CheckpointError(
            f"embedding shape {emb.shape} does not match config "
            f"({cfg.vocab_size}, {cfg.d_model})"
        )
    return cfg, tie_embeddings


_LAYER_SOURCES = (
    "norm.weight",
    "mixer.in_proj.weight",
    "mixer.conv1d.weight",
    "mixer.conv1d.bias",
    "mixer.x_proj.weight",
    "mixer.dt_proj.weight",
    "mixer.dt_proj.bias",
    "mixer.A_log",
    "mixer.D",
    "mixer.out_proj.weight",
)


def build_conversion_map(sd: dict[str, np.ndarray], cfg: ModelConfig, tie: bool) -> ConversionMap:
    rules = [ConversionRule(_embedding_key(sd), "embedding")]
    rules.append(ConversionRule("backbone.norm_f.weight", "final_norm"))
    if not tie:
        rules.append(ConversionRule("lm_head.weight", "lm_head"))

    known = {_embedding_key(sd), "backbone.norm_f.weight", "lm_head.weight"}
    for i in range(cfg.n_layers):
        src = f"backbone.layers.{i}."
        dst = f"layers.{i}."
        known.update(src + suffix for suffix in _LAYER_SOURCES)
        d_e, d_s, r = cfg.d_inner, cfg.d_state, cfg.dt_rank
        rules += [
            ConversionRule(src + "norm.weight", dst + "norm"),
            ConversionRule(src + "mixer.in_proj.weight", dst + "in_proj",
                           ("split-rows",), rows=(0, d_e)),
            ConversionRule(src + "mixer.in_proj.weight", dst + "gate_proj",
                           ("split-rows",), rows=(d_e, 2 * d_e)),
            ConversionRule(src + "mixer.out_proj.weight", dst + "out_proj"),
            ConversionRule(src + "mixer.x_proj.weight", dst + "delta_down",
                           ("split-rows",), rows=(0, r)),
            ConversionRule(src + "mixer.x_proj.weight", dst + "bc_proj",
                           ("split-rows",), rows=(r, r + 2 * d_s)),
            ConversionRule(src + "mixer.dt_proj.weight", dst + "delta_up"),
            ConversionRule(src + "mixer.dt_proj.bias", dst + "delta_bias"),
            ConversionRule(src + "mixer.conv1d.weight", dst + "conv_weight", ("squeeze-mid",)),
            ConversionRule(src + "mixer.conv1d.bias", dst + "conv_bias"),
            ConversionRule(src + "mixer.A_log", dst + "a", ("exp-negate", "transpose")),
            ConversionRule(src + "mixer.D", dst + "d"),
        ]

    missing = {r.source for r in rules} - set(sd)
    if missing:
        raise CheckpointError(f"not a Mamba-1 layout; missing tensors: {sorted(missing)}")
    unexpected = set(sd) - known
    if unexpected:
        raise CheckpointError(
            f"unrecognized layout; unexpected tensors: {sorted(unexpected)[:8]}"
        )
    # duplicate targets are a programming error; the dataclass check guards it
    return ConversionMap(config=cfg, rules=tuple(rules), tie_embeddings=tie)


def apply_rule(rule: ConversionRule, sd: dict[str, np.ndarray]) -> np.ndarray:
    arr = sd[rule.source]
    for op in rule.transforms:
        if op == "split-rows":
            lo, hi = rule.rows
            if hi > arr.shape[0]:
                raise CheckpointError(
                    f"{rule.source}: row split {rule.rows} exceeds shape {arr.shape}"
                )
            arr = arr[lo:hi]
        elif op == "squeeze-mid":
            if arr.ndim != 3 or arr.shape[1] != 1:
                raise CheckpointError(f"{rule.source}: expected (d, 1, k), got {arr.shape}")
            arr = arr[:, 0, :]
        elif op == "exp-negate":
            arr = -np.exp(arr)
            if np.any(arr >= 0):
                arr = np.where(arr >= 0, A_UNDERFLOW, arr)
        elif op == "transpose":
            arr = arr.T
        else:
            raise CheckpointError(f"unknown transform {op!r}")
    return np.ascontiguousarray(arr, dtype=np.float32)
