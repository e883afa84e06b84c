"""Per-channel attention scores implied by the selective scan.

Expanding the recurrence expresses every output as a weighted sum of past
inputs; the weight of token j on the output at position i, for channel c, is

    alpha[i, j] = sum_s C_i[s] * (prod_{k=j+1..i} A_bar_k[s, c]) * B_bar_j[s, c]

with alpha[i, j] = 0 for j > i (causality). The decay product is evaluated
through a running sum of step sizes, exp((T_i - T_j) * A[s, c]) with
T_t = sum_{k<=t} Delta_k[c], so each row costs O(L * d_s) instead of
recomputing O(L) products per cell.

The receptive field of a query position is the distance back to the earliest
token whose score magnitude exceeds a significance threshold (default 1e-3).
Significance uses |alpha|: scores can be negative and heatmaps are plotted on
log-magnitude scale.

This module always computes in float64.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._util import log_mean_exp, max_workers
from .ssm import FilterPolicy, SsmInputs, check_decay_matrix

__all__ = [
    "AttentionSlice",
    "ReceptiveFieldProfile",
    "DecayCurve",
    "attention_scores",
    "receptive_field",
    "decay_curve",
    "render_values",
    "export_heatmap",
]

DEFAULT_EPSILON = 1e-3

# Above this sequence length, full maps are subsampled by default: a 16k x 16k
# float64 map is 2 GB per channel.
AUTO_STRIDE_LIMIT = 4096


@dataclass(frozen=True)
class AttentionSlice:
    """Rows of one channel's lower-triangular attention-score matrix.

    ``alpha`` has shape (len(rows), seq_len); row r holds the scores of query
    position rows[r] against every key position, zero beyond the diagonal.
    """

    channel: int
    layer: int
    alpha: np.ndarray
    rows: np.ndarray
    seq_len: int

    def __post_init__(self):
        if self.alpha.shape != (len(self.rows), self.seq_len):
            raise ValueError("alpha shape must be (len(rows), seq_len)")
        if not np.all(np.isfinite(self.alpha)):
            raise ValueError("alpha contains non-finite entries")


@dataclass(frozen=True)
class ReceptiveFieldProfile:
    """Per query position, how far back significant scores reach.

    span[r] = rows[r] - min{j : |alpha| > epsilon} + 1, or 0 when no key
    position is significant.
    """

    channel: int
    layer: int
    epsilon: float
    span: np.ndarray
    rows: np.ndarray


@dataclass(frozen=True)
class DecayCurve:
    """Cumulative state decay of one channel over a sequence.

    values[t] is the mean over the state dimension of
    exp((sum_{k<=t} Delta_k[c]) * A[s, c]), evaluated in the log domain;
    entries underflowing float64 are reported as 0 with the log value
    retained in ``log_values``.
    """

    channel: int
    layer: int
    values: np.ndarray
    log_values: np.ndarray = field(repr=False)


def _channel_scores(
    inputs: SsmInputs,
    a: np.ndarray,
    ch: int,
    rows: np.ndarray,
    policy: FilterPolicy | None,
) -> np.ndarray:
    delta_c = inputs.delta[:, ch].astype(np.float64)
    a_col = a[:, ch].astype(np.float64)  # (d_s,)
    b = inputs.b.astype(np.float64)      # (L, d_s)
    c = inputs.c.astype(np.float64)

    if policy is not None and policy.global_mask[ch]:
        kept = delta_c >= policy.thresholds[ch]
        eff_delta = np.where(kept, delta_c, 0.0)
    else:
        kept = None
        eff_delta = delta_c

    t_sum = np.cumsum(eff_delta)                       # running log-product exponent
    b_bar = b.T * delta_c[None, :]                     # (d_s, L)
    if kept is not None:
        b_bar = np.where(kept[None, :], b_bar, 0.0)    # filtered tokens write nothing

    out = np.zeros((len(rows), inputs.seq_len), dtype=np.float64)
    for r, i in enumerate(rows):
        gap = t_sum[i] - t_sum[: i + 1]                # (i+1,) nonnegative
        decay = np.exp(gap[None, :] * a_col[:, None])  # (d_s, i+1)
        out[r, : i + 1] = c[i] @ (decay * b_bar[:, : i + 1])
    return out


def attention_scores(
    inputs: SsmInputs,
    a: np.ndarray,
    channels=None,
    layer: int = 0,
    row_range: tuple[int, int] | None = None,
    row_stride: int | None = None,
    policy: FilterPolicy | None = None,
) -> list[AttentionSlice]:
    """Materialize attention-score rows for the requested channels.

    channels defaults to all of them; row_range is a half-open (start, stop)
    interval of query positions, defaulting to the whole sequence. For
    sequences longer than 4096 the default stride subsamples rows to keep
    maps bounded; pass row_stride=1 to force every row. An optional policy
    produces the scores of the token-filtered system instead.
    """
    a = check_decay_matrix(a)
    L = inputs.seq_len
    if channels is None:
        channels = range(inputs.d_inner)
    channels = [int(ch) for ch in channels]
    for ch in channels:
        if not 0 <= ch < inputs.d_inner:
            raise IndexError(f"channel {ch} out of range [0, {inputs.d_inner})")

    start, stop = row_range if row_range is not None else (0, L)
    if not (0 <= start < stop <= L):
        raise IndexError(f"row range ({start}, {stop}) invalid for L={L}")
    if row_stride is None:
        row_stride = max(1, L // AUTO_STRIDE_LIMIT) if L > AUTO_STRIDE_LIMIT else 1
    rows = np.arange(start, stop, row_stride)

    def make(ch: int) -> AttentionSlice:
        alpha = _channel_scores(inputs, a, ch, rows, policy)
        return AttentionSlice(channel=ch, layer=layer, alpha=alpha, rows=rows, seq_len=L)

    workers = max_workers()
    if workers > 1 and len(channels) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(make, channels))
    return [make(ch) for ch in channels]


def receptive_field(slice_: AttentionSlice, epsilon: float = DEFAULT_EPSILON) -> ReceptiveFieldProfile:
    """Span of significant history per stored query row, |alpha| > epsilon."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    span = np.zeros(len(slice_.rows), dtype=np.int64)
    for r, i in enumerate(slice_.rows):
        sig = np.abs(slice_.alpha[r, : i + 1]) > epsilon
        if sig.any():
            span[r] = i - int(np.argmax(sig)) + 1
    return ReceptiveFieldProfile(
        channel=slice_.channel,
        layer=slice_.layer,
        epsilon=epsilon,
        span=span,
        rows=slice_.rows,
    )


def decay_curve(delta: np.ndarray, a: np.ndarray, channel: int, layer: int = 0) -> DecayCurve:
    """Cumulative decay of one channel after each prefix of the sequence."""
    a = check_decay_matrix(a)
    delta = np.asarray(delta, dtype=np.float64)
    if not np.all(delta > 0):
        raise ValueError("delta must be strictly positive")
    if not 0 <= channel < delta.shape[1]:
        raise IndexError(f"channel {channel} out of range")
    t_sum = np.cumsum(delta[:, channel])
    z = t_sum[:, None] * a[:, channel][None, :]  # (L, d_s)
    log_values = log_mean_exp(z, axis=1)
    with np.errstate(under="ignore"):
        values = np.exp(log_values)
    return DecayCurve(channel=channel, layer=layer, values=values, log_values=log_values)


def render_values(slice_: AttentionSlice, scale: str = "log", floor: float = -16.0) -> np.ndarray:
    """Matrix used for heatmap coloring: log10|alpha| or raw scores.

    On log scale, zeros (and magnitudes below 10**floor) map to the floor.
    """
    if scale == "linear":
        return slice_.alpha.copy()
    if scale != "log":
        raise ValueError(f"scale must be 'log' or 'linear', got {scale!r}")
    mag = np.abs(slice_.alpha)
    out = np.full_like(mag, floor)
    nz = mag > 10.0**floor
    out[nz] = np.log10(mag[nz])
    return out


def export_heatmap(slice_: AttentionSlice, path, scale: str = "log", svg: bool = False) -> list[Path]:
    """Write a slice as CSV (canonical) and optionally as an SVG heatmap.

    The CSV holds the lower triangle with header ``i,j,alpha``; float cells
    use shortest round-trip formatting, so re-exporting an identical slice
    produces identical bytes. The SVG colors cells by log10|alpha| (or the
    raw value on linear scale).
    """
    path = Path(path)
    written = [path]
    lines = ["i,j,alpha"]
    for r, i in enumerate(slice_.rows):
        for j in range(i + 1):
            lines.append(f"{i},{j},{float(slice_.alpha[r, j])!r}")
    path.write_text("\n".join(lines) + "\n")

    if svg:
        svg_path = path.with_suffix(".svg")
        written.append(svg_path)
        svg_path.write_text(_svg_heatmap(slice_, scale))
    return written


def _svg_heatmap(slice_: AttentionSlice, scale: str) -> str:
    vals = render_values(slice_, scale)
    lo = float(vals.min())
    hi = float(vals.max())
    spread = hi - lo if hi > lo else 1.0
    cell = 4
    w = slice_.seq_len * cell
    h = len(slice_.rows) * cell
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}">',
        f'<rect width="{w}" height="{h}" fill="#000000"/>',
    ]
    for r, i in enumerate(slice_.rows):
        for j in range(i + 1):
            level = int(round(255 * (vals[r, j] - lo) / spread))
            if level == 0:
                continue
            color = f"#{level:02x}{level:02x}{level:02x}"
            parts.append(
                f'<rect x="{j * cell}" y="{r * cell}" width="{cell}" height="{cell}" '
                f'fill="{color}"/>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
