"""Selective state-space scan kernels.

The recurrence operates on per-token inputs and a negative decay matrix A of
shape (d_s, d_e):

    A_bar_t[s, c] = exp(Delta_t[c] * A[s, c])          decay factor in (0, 1)
    B_bar_t[s, c] = Delta_t[c] * B_t[s]                input gate (outer product)
    H_t           = A_bar_t * H_{t-1} + B_bar_t * X_t  (X_t broadcast over s)
    Y_t[c]        = sum_s C_t[s] * H_t[s, c]

``selective_scan`` runs the recurrence over a whole sequence.
``expand_hidden_state`` recomputes a single state by direct summation

    H_i = sum_{j<=i} (prod_{k=j+1..i} A_bar_k) * B_bar_j * X_j

and serves as the independent oracle for the scan.

``filtered_scan`` is the token-filtered variant: on channels marked global by
a :class:`FilterPolicy`, steps whose Delta falls strictly below the channel's
threshold leave the state column untouched (decay 1, input 0); the output at
such a step reads the frozen column. The boundary case Delta == threshold is
a normal update.

All functions are pure and run in the dtype of their inputs: float32 for
model inference, float64 for analysis and oracle paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "NumericsError",
    "SsmInputs",
    "FilterPolicy",
    "softplus",
    "discretize",
    "selective_scan",
    "filtered_scan",
    "expand_hidden_state",
    "scan_step",
]


class NumericsError(ArithmeticError):
    """NaN produced mid-scan. Carries the offending timestep index."""

    def __init__(self, timestep: int, message: str):
        super().__init__(message)
        self.timestep = timestep


def softplus(x):
    """Overflow-safe ln(1 + exp(x)); for x > 30 returns x itself."""
    arr = np.asarray(x)
    out = np.where(arr > 30.0, arr, np.log1p(np.exp(np.minimum(arr, 30.0))))
    if np.isscalar(x) or arr.ndim == 0:
        return float(out)
    return out


def check_decay_matrix(a: np.ndarray) -> np.ndarray:
    """Validate a (d_s, d_e) decay matrix: finite and strictly negative."""
    a = np.asarray(a)
    if a.ndim != 2:
        raise ValueError(f"decay matrix must be 2-d (d_s, d_e), got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("decay matrix contains non-finite entries")
    if not np.all(a < 0):
        bad = np.argwhere(a >= 0)[0]
        raise ValueError(
            f"decay matrix must be strictly negative; entry {tuple(bad)} is {a[tuple(bad)]}"
        )
    return a


@dataclass(frozen=True)
class SsmInputs:
    """Per-token scan inputs sharing leading dimension L.

    x:     (L, d_e) post-convolution activations
    delta: (L, d_e) strictly positive step sizes
    b:     (L, d_s) input gates
    c:     (L, d_s) output gates
    """

    x: np.ndarray
    delta: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        for name in ("x", "delta", "b", "c"):
            arr = getattr(self, name)
            if arr.ndim != 2:
                raise ValueError(f"{name} must be 2-d, got shape {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains NaN/Inf")
        L = self.x.shape[0]
        if not (self.delta.shape[0] == self.b.shape[0] == self.c.shape[0] == L):
            raise ValueError("x, delta, b, c must share leading dimension L")
        if self.delta.shape[1] != self.x.shape[1]:
            raise ValueError("delta and x must share channel dimension d_e")
        if self.b.shape[1] != self.c.shape[1]:
            raise ValueError("b and c must share state dimension d_s")
        if not np.all(self.delta > 0):
            raise ValueError("delta must be strictly positive elementwise")

    @property
    def seq_len(self) -> int:
        return self.x.shape[0]

    @property
    def d_inner(self) -> int:
        return self.x.shape[1]

    @property
    def d_state(self) -> int:
        return self.b.shape[1]


@dataclass(frozen=True)
class FilterPolicy:
    """Which channels are global and below what step size they freeze.

    Threshold entries for local channels are ignored and stored as 0.
    """

    global_mask: np.ndarray  # (d_e,) bool
    thresholds: np.ndarray   # (d_e,) finite, >= 0

    def __post_init__(self):
        if self.global_mask.shape != self.thresholds.shape:
            raise ValueError("global_mask and thresholds must have equal length")
        if self.global_mask.dtype != np.bool_:
            raise ValueError("global_mask must be boolean")
        if not np.all(np.isfinite(self.thresholds)) or np.any(self.thresholds < 0):
            raise ValueError("thresholds must be finite and nonnegative")

    def frozen_at(self, delta_t: np.ndarray) -> np.ndarray:
        """Boolean (d_e,) mask: channels whose state is carried unchanged."""
        return self.global_mask & (delta_t < self.thresholds)

    def frozen_steps(self, delta: np.ndarray) -> np.ndarray:
        """Boolean (L, d_e) mask over a whole Delta matrix."""
        return self.global_mask[None, :] & (delta < self.thresholds[None, :])


def discretize(delta_t: np.ndarray, a: np.ndarray, b_t: np.ndarray):
    """One token's discretization: A_bar = exp(delta * A), B_bar = delta outer B.

    delta_t: (d_e,) strictly positive; a: (d_s, d_e) strictly negative;
    b_t: (d_s,). Returns (A_bar, B_bar), both (d_s, d_e), A_bar in (0, 1).
    """
    delta_t = np.asarray(delta_t)
    b_t = np.asarray(b_t)
    if not np.all(delta_t > 0):
        raise ValueError("delta_t must be strictly positive")
    a = check_decay_matrix(a)
    a_bar = np.exp(delta_t[None, :] * a)
    b_bar = b_t[:, None] * delta_t[None, :]
    return a_bar, b_bar


def _prepare_state(h0, d_s: int, d_e: int, dtype) -> np.ndarray:
    if h0 is None:
        return np.zeros((d_s, d_e), dtype=dtype)
    h0 = np.asarray(h0)
    if h0.shape != (d_s, d_e):
        raise ValueError(f"h0 shape {h0.shape} does not match (d_s, d_e)=({d_s}, {d_e})")
    if not np.all(np.isfinite(h0)):
        raise ValueError("h0 contains NaN/Inf")
    return h0.astype(dtype, copy=True)


def _scan(inputs: SsmInputs, a: np.ndarray, h0, policy: FilterPolicy | None):
    a = check_decay_matrix(a)
    if a.shape != (inputs.d_state, inputs.d_inner):
        raise ValueError(
            f"decay matrix shape {a.shape} does not match inputs "
            f"(d_s, d_e)=({inputs.d_state}, {inputs.d_inner})"
        )
    if policy is not None and policy.global_mask.shape[0] != inputs.d_inner:
        raise ValueError("policy dimension does not match d_e")

    x, delta, b, c = inputs.x, inputs.delta, inputs.b, inputs.c
    dtype = np.result_type(x.dtype, delta.dtype, b.dtype, c.dtype, a.dtype)
    h = _prepare_state(h0, inputs.d_state, inputs.d_inner, dtype)
    y = np.empty((inputs.seq_len, inputs.d_inner), dtype=dtype)

    for t in range(inputs.seq_len):
        a_bar = np.exp(delta[t][None, :] * a)
        b_bar = b[t][:, None] * delta[t][None, :]
        upd = a_bar * h + b_bar * x[t][None, :]
        if policy is not None:
            frozen = policy.frozen_at(delta[t])
            if frozen.any():
                # Frozen columns keep their previous bits exactly.
                upd = np.where(frozen[None, :], h, upd)
        h = upd
        if np.isnan(h).any():
            raise NumericsError(t, f"NaN in hidden state at timestep {t}")
        y[t] = c[t] @ h
    return y, h


def selective_scan(inputs: SsmInputs, a: np.ndarray, h0=None):
    """Run the full recurrence; returns (Y of shape (L, d_e), final state).

    Chunkable: scanning [0..p) and then [p..L) with the carried state equals
    one whole-sequence scan.
    """
    return _scan(inputs, a, h0, policy=None)


def filtered_scan(inputs: SsmInputs, a: np.ndarray, h0=None, policy: FilterPolicy | None = None):
    """Token-filtered scan. With policy=None or all-zero thresholds this is
    arithmetically identical to :func:`selective_scan`."""
    return _scan(inputs, a, h0, policy=policy)


def expand_hidden_state(inputs: SsmInputs, a: np.ndarray, i: int) -> np.ndarray:
    """State after the first ``i`` tokens (1 <= i <= L) by direct summation.

    Starts from a zero state. Each term's decay product is evaluated as an
    explicit elementwise product reduction, independent of the recurrence, so
    this function doubles as the scan oracle. O(i^2) work.
    """
    a = check_decay_matrix(a)
    if not 1 <= i <= inputs.seq_len:
        raise IndexError(f"timestep index {i} out of range [1, {inputs.seq_len}]")
    delta, b, x = inputs.delta, inputs.b, inputs.x
    a_bars = np.exp(delta[:i, None, :] * a[None, :, :])  # (i, d_s, d_e)
    h = np.zeros((inputs.d_state, inputs.d_inner), dtype=np.result_type(x.dtype, a.dtype))
    for j in range(i):
        decay = np.multiply.reduce(a_bars[j + 1 : i], axis=0) if j + 1 < i else 1.0
        b_bar = b[j][:, None] * delta[j][None, :]
        h = h + decay * b_bar * x[j][None, :]
    return h


def scan_step(
    h: np.ndarray,
    x_t: np.ndarray,
    delta_t: np.ndarray,
    b_t: np.ndarray,
    c_t: np.ndarray,
    a: np.ndarray,
    policy: FilterPolicy | None = None,
):
    """One recurrence step for token-by-token decoding.

    Iterating scan_step over a sequence reproduces the batch scan outputs
    position by position. Returns (y_t of shape (d_e,), new state).
    """
    a = check_decay_matrix(a)
    d_s, d_e = a.shape
    if h.shape != (d_s, d_e):
        raise ValueError(f"state shape {h.shape} does not match (d_s, d_e)={a.shape}")
    if x_t.shape != (d_e,) or delta_t.shape != (d_e,):
        raise ValueError("x_t and delta_t must have shape (d_e,)")
    if b_t.shape != (d_s,) or c_t.shape != (d_s,):
        raise ValueError("b_t and c_t must have shape (d_s,)")
    if not np.all(delta_t > 0):
        raise ValueError("delta_t must be strictly positive")

    a_bar = np.exp(delta_t[None, :] * a)
    b_bar = b_t[:, None] * delta_t[None, :]
    upd = a_bar * h + b_bar * x_t[None, :]
    if policy is not None:
        frozen = policy.frozen_at(delta_t)
        if frozen.any():
            upd = np.where(frozen[None, :], h, upd)
    if np.isnan(upd).any():
        raise NumericsError(0, "NaN in hidden state after step")
    return c_t @ upd, upd
