"""Small shared numeric and runtime helpers."""

from __future__ import annotations

import os

import numpy as np
from scipy.special import logsumexp


def log_mean_exp(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """log(mean(exp(z))) along an axis with shifted-exponent accumulation."""
    z = np.asarray(z, dtype=np.float64)
    return logsumexp(z, axis=axis) - np.log(z.shape[axis])


def max_workers() -> int:
    """Parallelism cap from LONGCTX_THREADS; defaults to 1 (serial)."""
    raw = os.environ.get("LONGCTX_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)
