"""Channel classification and threshold-table construction.

A channel is *global* when its cumulative state decay over the training
length stays above a threshold theta; everything else is *local*. The decay
statistic is exp((sum of step sizes) * A[s, c]) averaged over the state
dimension after exponentiation, evaluated with shifted exponents so values
far below float64 range still classify correctly.

For global channels, a per-channel filtering threshold g(S) is solved so that
the step-size mass kept at input length S matches the full mass seen at the
training length L. Writing m for the mean calibration step size and
f(g) = mean(samples * [sample >= g]), the decay-alignment condition reduces
to matching kept mass (the decay matrix multiplies both sides in the log
domain and cancels), so g minimizes |S * f(g) - L * m|. The empirical
objective is piecewise constant, so exact enumeration over the distinct
sample values (plus 0 and an above-maximum sentinel) finds the optimum;
ties break toward the smaller g, keeping more tokens.

Tables hold entries at fixed token intervals (default 1000). Lookups round
the requested length to the nearest interval, half upward, and clamp to the
table's range.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._util import log_mean_exp
from .ssm import check_decay_matrix

__all__ = [
    "ChannelClassification",
    "DeltaDistribution",
    "ThresholdTable",
    "cumulative_decay_at_length",
    "cumulative_log_decay_at_length",
    "classify_channels",
    "winsorize",
    "solve_threshold",
    "build_threshold_table",
    "round_to_interval",
    "lookup",
]

TABLE_FORMAT_VERSION = 1
DEFAULT_INTERVAL = 1000

# Threshold search grid used by classification sweeps.
THETA_GRID = (
    1e-40, 1e-30, 1e-20, 1e-10, 1e-5, 1e-4, 1e-3, 1e-2, 5e-2, 1e-1, 5e-1,
)


@dataclass(frozen=True)
class ChannelClassification:
    """Per-layer global/local labels with the decay statistic behind them."""

    layer: int
    labels: np.ndarray            # (d_e,) bool, True = global
    decay_at_train_len: np.ndarray
    log_decay: np.ndarray
    theta: float
    train_length: int

    @property
    def n_global(self) -> int:
        return int(self.labels.sum())

    @property
    def n_local(self) -> int:
        return int(len(self.labels) - self.labels.sum())

    def label_names(self) -> list[str]:
        return ["global" if g else "local" for g in self.labels]


@dataclass(frozen=True)
class DeltaDistribution:
    """Sorted, winsorized step-size samples of one (layer, channel)."""

    layer: int
    channel: int
    samples: np.ndarray
    clamp_percent: float

    def __post_init__(self):
        if len(self.samples) == 0:
            raise ValueError("samples must be nonempty")
        if not np.all(self.samples > 0):
            raise ValueError("samples must be positive")
        if np.any(np.diff(self.samples) < 0):
            raise ValueError("samples must be sorted ascending")
        if not 0 <= self.clamp_percent < 100:
            raise ValueError("clamp_percent must lie in [0, 100)")


def cumulative_log_decay_at_length(delta: np.ndarray, a: np.ndarray) -> np.ndarray:
    """log of the per-channel decay statistic for one calibration pass."""
    a = check_decay_matrix(a)
    delta = np.asarray(delta, dtype=np.float64)
    if not np.all(delta > 0):
        raise ValueError("delta must be strictly positive")
    # sequential running sum, so the result is bit-identical to the final
    # point of the per-prefix decay curve
    total = np.cumsum(delta, axis=0)[-1]      # (d_e,)
    z = total[None, :] * a                    # (d_s, d_e)
    return log_mean_exp(z, axis=0)


def cumulative_decay_at_length(delta: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Per-channel cumulative decay over a full calibration sequence.

    Equals the final point of :func:`longssm.attention.decay_curve` for the
    same inputs.
    """
    with np.errstate(under="ignore"):
        return np.exp(cumulative_log_decay_at_length(delta, a))


def classify_channels(
    decay: np.ndarray,
    theta: float,
    *,
    layer: int = 0,
    train_length: int = 0,
    log_decay: np.ndarray | None = None,
) -> ChannelClassification:
    """Label channels global (decay > theta) or local.

    When ``log_decay`` is supplied the comparison happens in the log domain,
    which stays exact for decays far below float64's smallest normal.
    """
    if theta <= 0:
        raise ValueError("theta must be positive")
    decay = np.asarray(decay, dtype=np.float64)
    if np.any(decay < 0) or np.any(decay > 1):
        raise ValueError("decay values must lie in [0, 1]")
    if log_decay is None:
        with np.errstate(divide="ignore"):
            log_decay = np.log(decay)
    labels = log_decay > np.log(theta)
    return ChannelClassification(
        layer=layer,
        labels=labels,
        decay_at_train_len=decay,
        log_decay=np.asarray(log_decay, dtype=np.float64),
        theta=float(theta),
        train_length=int(train_length),
    )


def winsorize(samples: np.ndarray, clamp_percent: float) -> np.ndarray:
    """Cap the top clamp_percent of samples at the (100 - C)th percentile.

    Capping (not dropping) preserves the sample count; applying the same
    clamp twice is a no-op.
    """
    if not 0 <= clamp_percent < 100:
        raise ValueError("clamp_percent must lie in [0, 100)")
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("samples must be nonempty")
    if clamp_percent == 0:
        return samples.copy()
    cap = np.percentile(samples, 100.0 - clamp_percent, method="lower")
    return np.minimum(samples, cap)


def solve_threshold(dist, train_length: int, target_length: int) -> float:
    """Filtering threshold aligning kept step-size mass at the target length.

    Accepts a :class:`DeltaDistribution` or a raw positive sample array.
    Returns 0 whenever target_length <= train_length (the budget is already
    met). Exact enumeration: candidates are 0, every distinct sample value,
    and a sentinel just above the maximum (filter everything).

    Thresholds can only fall on observed sample values, so a winsorize clamp
    coarser than the target kept mass leaves no usable candidate in the tail;
    calibrate with a smaller clamp when the target length is many multiples
    of the training length.
    """
    samples = dist.samples if isinstance(dist, DeltaDistribution) else np.asarray(dist, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("empty distribution")
    if target_length <= train_length:
        return 0.0

    samples = np.sort(samples)
    n = samples.size
    budget = train_length * samples.mean()

    values, first_idx = np.unique(samples, return_index=True)
    suffix = np.concatenate([np.cumsum(samples[::-1])[::-1], [0.0]])
    # kept mean when g equals each distinct value: all samples >= value stay
    kept_means = suffix[first_idx] / n

    candidates = np.concatenate([[0.0], values, [np.nextafter(values[-1], np.inf)]])
    kept = np.concatenate([[samples.mean()], kept_means, [0.0]])
    errors = np.abs(target_length * kept - budget)
    return float(candidates[int(np.argmin(errors))])  # argmin takes the first: smaller g


@dataclass(frozen=True)
class ThresholdTable:
    """Per-layer, per-global-channel map from rounded length S to threshold g."""

    train_length: int
    interval: int
    theta: float
    clamp_percent: float
    # layer index -> {channel index -> [(S, g), ...] with strictly increasing S}
    layers: dict[int, dict[int, list[tuple[int, float]]]] = field(default_factory=dict)
    format_version: int = TABLE_FORMAT_VERSION

    @property
    def s_max(self) -> int:
        for channels in self.layers.values():
            for entries in channels.values():
                return entries[-1][0]
        return self.interval

    def to_json_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "train_length": self.train_length,
            "interval": self.interval,
            "theta": self.theta,
            "clamp_percent": self.clamp_percent,
            "layers": [
                {
                    "layer": layer,
                    "channels": [
                        {"channel": ch, "entries": [[s, g] for s, g in entries]}
                        for ch, entries in sorted(channels.items())
                    ],
                }
                for layer, channels in sorted(self.layers.items())
            ],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "ThresholdTable":
        if data.get("format_version") != TABLE_FORMAT_VERSION:
            raise ValueError(f"unsupported table format_version {data.get('format_version')}")
        layers = {
            entry["layer"]: {
                ch["channel"]: [(int(s), float(g)) for s, g in ch["entries"]]
                for ch in entry["channels"]
            }
            for entry in data["layers"]
        }
        return cls(
            train_length=int(data["train_length"]),
            interval=int(data["interval"]),
            theta=float(data["theta"]),
            clamp_percent=float(data["clamp_percent"]),
            layers=layers,
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "ThresholdTable":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


def build_threshold_table(
    dists: list[list[DeltaDistribution]],
    classifications: list[ChannelClassification],
    train_length: int,
    s_max: int,
    interval: int = DEFAULT_INTERVAL,
) -> ThresholdTable:
    """Solve g(S) on the interval grid for every global channel of every layer.

    ``dists`` is indexed [layer][channel]; only channels labeled global get
    table entries. Lengths at or below the training length record g = 0.
    """
    if s_max < interval:
        raise ValueError(f"s_max ({s_max}) must be at least one interval ({interval})")
    if len(dists) != len(classifications):
        raise ValueError("dists and classifications must cover the same layers")
    grid = [interval * k for k in range(1, s_max // interval + 1)]
    theta = classifications[0].theta if classifications else 0.0
    clamp = dists[0][0].clamp_percent if dists and dists[0] else 0.0

    layers: dict[int, dict[int, list[tuple[int, float]]]] = {}
    for layer_dists, cls_ in zip(dists, classifications):
        per_channel: dict[int, list[tuple[int, float]]] = {}
        for ch in np.flatnonzero(cls_.labels):
            d = layer_dists[ch]
            per_channel[int(ch)] = [(s, solve_threshold(d, train_length, s)) for s in grid]
        layers[cls_.layer] = per_channel
    return ThresholdTable(
        train_length=int(train_length),
        interval=int(interval),
        theta=float(theta),
        clamp_percent=float(clamp),
        layers=layers,
    )


def round_to_interval(seq_len: int, interval: int, s_max: int) -> int:
    """Nearest interval multiple (half rounds up), clamped to [interval, s_max]."""
    row = ((seq_len + interval // 2) // interval) * interval
    return min(max(row, interval), (s_max // interval) * interval)


def lookup(table: ThresholdTable, seq_len: int) -> dict[int, dict[int, float]]:
    """Thresholds for a given input length: {layer: {channel: g}}."""
    if not table.layers:
        raise ValueError("empty threshold table")
    row = round_to_interval(seq_len, table.interval, table.s_max)
    out: dict[int, dict[int, float]] = {}
    for layer, channels in table.layers.items():
        out[layer] = {}
        for ch, entries in channels.items():
            for s, g in entries:
                if s == row:
                    out[layer][ch] = g
                    break
            else:
                raise ValueError(f"table row S={row} missing for layer {layer} channel {ch}")
    return out
