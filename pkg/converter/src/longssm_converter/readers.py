"""Checkpoint readers: raw torch state dicts, safetensors files, HF directories.

Every reader returns (state_dict of float32 numpy arrays, hf_config or None).
Tensors are upcast to float32 before any transform is applied.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

__all__ = ["CheckpointError", "read_checkpoint"]


class CheckpointError(ValueError):
    """Unreadable or unrecognized checkpoint artifact."""


def _to_f32(tensor) -> np.ndarray:
    import torch

    arr = tensor.detach().to(torch.float32).cpu().numpy()
    if not np.all(np.isfinite(arr)):
        raise CheckpointError("checkpoint tensor contains non-finite values")
    return arr


def _unwrap(obj) -> dict:
    # common wrappers around the actual parameter dict
    for key in ("state_dict", "model", "module"):
        if isinstance(obj, dict) and key in obj and isinstance(obj[key], dict):
            obj = obj[key]
    if not isinstance(obj, dict):
        raise CheckpointError("checkpoint does not contain a tensor dictionary")
    return obj


def _read_torch_file(path: Path) -> dict[str, np.ndarray]:
    import torch

    try:
        obj = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read {path} as a torch checkpoint: {exc}") from exc
    sd = _unwrap(obj)
    out = {}
    for name, tensor in sd.items():
        if not torch.is_tensor(tensor):
            raise CheckpointError(f"entry {name!r} is not a tensor")
        out[name] = _to_f32(tensor)
    return out


def _read_safetensors_file(path: Path) -> dict[str, np.ndarray]:
    try:
        from safetensors.torch import load_file
    except ImportError as exc:
        raise CheckpointError(
            "safetensors is required to read .safetensors checkpoints"
        ) from exc
    return {name: _to_f32(tensor) for name, tensor in load_file(str(path)).items()}


def _read_hf_dir(path: Path) -> tuple[dict[str, np.ndarray], dict]:
    config = json.loads((path / "config.json").read_text())
    for fname, reader in (
        ("model.safetensors", _read_safetensors_file),
        ("pytorch_model.bin", _read_torch_file),
    ):
        if (path / fname).exists():
            return reader(path / fname), config
    raise CheckpointError(f"{path}: no model.safetensors or pytorch_model.bin found")


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict | None]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    if path.is_dir():
        if (path / "config.json").exists():
            return _read_hf_dir(path)
        raise CheckpointError(f"{path}: directory is not a Hugging Face model layout")
    if path.suffix == ".safetensors":
        return _read_safetensors_file(path), None
    return _read_torch_file(path), None
