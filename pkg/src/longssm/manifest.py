"""Weight-manifest loading and saving.

A model directory holds ``manifest.json`` plus raw little-endian, row-major
float32 binaries. The manifest lists every tensor with its name, shape,
dtype, file, and byte offset:

    {"format_version": 1,
     "config": {...},
     "tensors": [{"name": "...", "shape": [..], "dtype": "f32",
                  "file": "weights.bin", "byte_offset": 0}, ...]}

Loading validates every declared shape against the configuration, checks
byte extents, rejects non-finite values, and enforces the strictly negative
decay matrix (optionally clamping offenders with a warning instead).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

__all__ = [
    "ManifestError",
    "ModelConfig",
    "LayerWeights",
    "ModelBundle",
    "load_model",
    "save_model",
]

MANIFEST_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"

# Offending decay entries are moved here when clamping is requested.
A_CLAMP_VALUE = -1e-6


class ManifestError(ValueError):
    """Malformed or inconsistent weight manifest."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    d_inner: int
    d_state: int
    n_layers: int
    train_length: int
    conv_kernel: int = 4
    dt_rank: int = 0          # 0: step sizes are softplus of the activations directly
    tied_embeddings: bool = True

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "d_inner", "d_state", "n_layers",
                     "train_length", "conv_kernel"):
            if getattr(self, name) <= 0:
                raise ManifestError(f"config field {name} must be positive")
        if self.dt_rank < 0:
            raise ManifestError("dt_rank must be >= 0")

    def to_json_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_dict(cls, data: dict) -> "ModelConfig":
        try:
            return cls(**data)
        except TypeError as exc:
            raise ManifestError(f"bad config block: {exc}") from exc


@dataclass
class LayerWeights:
    """One block's tensors; shapes follow the (out_features, in_features) convention."""

    in_proj: np.ndarray      # (d_e, d_m)
    gate_proj: np.ndarray    # (d_e, d_m)
    out_proj: np.ndarray     # (d_m, d_e)
    bc_proj: np.ndarray      # (2*d_s, d_e)
    conv_weight: np.ndarray  # (d_e, conv_kernel) depthwise causal
    conv_bias: np.ndarray    # (d_e,)
    a: np.ndarray            # (d_s, d_e) strictly negative
    d: np.ndarray            # (d_e,) skip scale
    norm: np.ndarray         # (d_m,) pre-block RMS scale
    delta_down: np.ndarray | None = None  # (dt_rank, d_e)
    delta_up: np.ndarray | None = None    # (d_e, dt_rank)
    delta_bias: np.ndarray | None = None  # (d_e,)


@dataclass
class ModelBundle:
    """Configuration plus all weights; read-only at run time."""

    config: ModelConfig
    embedding: np.ndarray    # (vocab, d_m)
    layers: list[LayerWeights]
    final_norm: np.ndarray   # (d_m,)
    lm_head: np.ndarray      # (vocab, d_m); is the embedding array when tied


def _expected_tensors(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    c = config
    spec: dict[str, tuple[int, ...]] = {
        "embedding": (c.vocab_size, c.d_model),
        "final_norm": (c.d_model,),
    }
    if not c.tied_embeddings:
        spec["lm_head"] = (c.vocab_size, c.d_model)
    for i in range(c.n_layers):
        p = f"layers.{i}."
        spec[p + "norm"] = (c.d_model,)
        spec[p + "in_proj"] = (c.d_inner, c.d_model)
        spec[p + "gate_proj"] = (c.d_inner, c.d_model)
        spec[p + "out_proj"] = (c.d_model, c.d_inner)
        spec[p + "bc_proj"] = (2 * c.d_state, c.d_inner)
        spec[p + "conv_weight"] = (c.d_inner, c.conv_kernel)
        spec[p + "conv_bias"] = (c.d_inner,)
        spec[p + "a"] = (c.d_state, c.d_inner)
        spec[p + "d"] = (c.d_inner,)
        if c.dt_rank > 0:
            spec[p + "delta_down"] = (c.dt_rank, c.d_inner)
            spec[p + "delta_up"] = (c.d_inner, c.dt_rank)
            spec[p + "delta_bias"] = (c.d_inner,)
    return spec


def _validate_a(name: str, a: np.ndarray, clamp: bool) -> np.ndarray:
    bad = a >= 0
    if not bad.any():
        return a
    if clamp:
        n = int(bad.sum())
        warnings.warn(
            f"{name}: clamped {n} non-negative decay entr{'y' if n == 1 else 'ies'} "
            f"to {A_CLAMP_VALUE}",
            stacklevel=3,
        )
        return np.where(bad, np.float32(A_CLAMP_VALUE), a)
    idx = tuple(int(v) for v in np.argwhere(bad)[0])
    raise ManifestError(
        f"tensor {name} must be strictly negative; entry {idx} is {a[idx]}"
    )


def load_model(model_dir, clamp_nonnegative_a: bool = False) -> ModelBundle:
    """Read and validate a manifest directory into an immutable bundle."""
    model_dir = Path(model_dir)
    manifest_path = model_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise ManifestError(f"missing {MANIFEST_NAME} in {model_dir}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != MANIFEST_FORMAT_VERSION:
        raise ManifestError(f"unsupported format_version {manifest.get('format_version')}")
    config = ModelConfig.from_json_dict(manifest["config"])

    expected = _expected_tensors(config)
    declared = {t["name"]: t for t in manifest["tensors"]}
    missing = sorted(set(expected) - set(declared))
    if missing:
        raise ManifestError(f"missing tensors: {', '.join(missing)}")

    blobs: dict[str, bytes] = {}
    tensors: dict[str, np.ndarray] = {}
    for name, shape in expected.items():
        entry = declared[name]
        if tuple(entry["shape"]) != shape:
            raise ManifestError(
                f"tensor {name}: declared shape {tuple(entry['shape'])}, expected {shape}"
            )
        if entry["dtype"] != "f32":
            raise ManifestError(f"tensor {name}: unsupported dtype {entry['dtype']!r}")
        fname = entry["file"]
        if fname not in blobs:
            fpath = model_dir / fname
            if not fpath.exists():
                raise ManifestError(f"missing weight file {fname}")
            blobs[fname] = fpath.read_bytes()
        blob = blobs[fname]
        offset = int(entry["byte_offset"])
        nbytes = 4 * int(np.prod(shape))
        if offset + nbytes > len(blob):
            raise ManifestError(
                f"tensor {name}: needs bytes [{offset}, {offset + nbytes}) "
                f"but {fname} holds {len(blob)} bytes"
            )
        arr = np.frombuffer(blob[offset : offset + nbytes], dtype="<f4").reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise ManifestError(f"tensor {name} contains non-finite values")
        tensors[name] = arr

    layers = []
    for i in range(config.n_layers):
        p = f"layers.{i}."
        a = _validate_a(p + "a", tensors[p + "a"], clamp_nonnegative_a)
        layers.append(
            LayerWeights(
                in_proj=tensors[p + "in_proj"],
                gate_proj=tensors[p + "gate_proj"],
                out_proj=tensors[p + "out_proj"],
                bc_proj=tensors[p + "bc_proj"],
                conv_weight=tensors[p + "conv_weight"],
                conv_bias=tensors[p + "conv_bias"],
                a=a,
                d=tensors[p + "d"],
                norm=tensors[p + "norm"],
                delta_down=tensors.get(p + "delta_down"),
                delta_up=tensors.get(p + "delta_up"),
                delta_bias=tensors.get(p + "delta_bias"),
            )
        )
    embedding = tensors["embedding"]
    lm_head = embedding if config.tied_embeddings else tensors["lm_head"]
    return ModelBundle(
        config=config,
        embedding=embedding,
        layers=layers,
        final_norm=tensors["final_norm"],
        lm_head=lm_head,
    )


def _layer_tensor_items(i: int, lw: LayerWeights):
    p = f"layers.{i}."
    items = [
        (p + "norm", lw.norm),
        (p + "in_proj", lw.in_proj),
        (p + "gate_proj", lw.gate_proj),
        (p + "out_proj", lw.out_proj),
        (p + "bc_proj", lw.bc_proj),
        (p + "conv_weight", lw.conv_weight),
        (p + "conv_bias", lw.conv_bias),
        (p + "a", lw.a),
        (p + "d", lw.d),
    ]
    if lw.delta_down is not None:
        items += [
            (p + "delta_down", lw.delta_down),
            (p + "delta_up", lw.delta_up),
            (p + "delta_bias", lw.delta_bias),
        ]
    return items


def save_model(bundle: ModelBundle, out_dir) -> Path:
    """Write a bundle as a manifest directory (single weights.bin blob)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    items: list[tuple[str, np.ndarray]] = [
        ("embedding", bundle.embedding),
        ("final_norm", bundle.final_norm),
    ]
    if not bundle.config.tied_embeddings:
        items.append(("lm_head", bundle.lm_head))
    for i, lw in enumerate(bundle.layers):
        items.extend(_layer_tensor_items(i, lw))

    entries = []
    offset = 0
    chunks = []
    for name, arr in items:
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "f32",
                "file": WEIGHTS_NAME,
                "byte_offset": offset,
            }
        )
        chunks.append(data)
        offset += len(data)

    (out_dir / WEIGHTS_NAME).write_bytes(b"".join(chunks))
    manifest = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "config": bundle.config.to_json_dict(),
        "tensors": entries,
    }
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    return out_dir
