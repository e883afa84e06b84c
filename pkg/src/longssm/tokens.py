"""Binary token-stream files: magic "TOKS", u32 version, u64 count, u32 ids."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = ["TokenStreamError", "read_tokens", "write_tokens"]

MAGIC = b"TOKS"
VERSION = 1


class TokenStreamError(ValueError):
    """Malformed token-stream file."""


def write_tokens(path, ids) -> Path:
    path = Path(path)
    ids = np.ascontiguousarray(ids, dtype="<u4")
    if ids.ndim != 1:
        raise TokenStreamError("token stream must be one-dimensional")
    header = MAGIC + struct.pack("<IQ", VERSION, ids.size)
    path.write_bytes(header + ids.tobytes())
    return path


def read_tokens(path) -> np.ndarray:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise TokenStreamError(f"{path}: not a token stream (bad magic)")
    version, count = struct.unpack("<IQ", blob[4:16])
    if version != VERSION:
        raise TokenStreamError(f"{path}: unsupported version {version}")
    expected = 16 + 4 * count
    if len(blob) != expected:
        raise TokenStreamError(f"{path}: expected {expected} bytes, found {len(blob)}")
    return np.frombuffer(blob, dtype="<u4", offset=16, count=count).copy()
