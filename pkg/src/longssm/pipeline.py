"""Calibration drivers: run the model over calibration streams and feed the
channel analysis.

Step-size statistics are recorded after the softplus, before discretization,
pooled over every calibration sequence and time step. The classification
decay statistic is averaged across calibration sequences in the log domain.
"""

from __future__ import annotations

import numpy as np

from ._util import log_mean_exp
from .channels import (
    ChannelClassification,
    DeltaDistribution,
    ThresholdTable,
    build_threshold_table,
    classify_channels,
    winsorize,
)
from .manifest import ModelBundle
from .runtime import trace_ssm_inputs

__all__ = ["collect_delta_stats", "classify_layers", "calibrate"]


def _traces(bundle: ModelBundle, sequences) -> list[list[np.ndarray]]:
    """Per layer, the list of (L, d_e) step-size matrices, one per sequence."""
    if not sequences:
        raise ValueError("need at least one calibration sequence")
    per_layer: list[list[np.ndarray]] = [[] for _ in range(bundle.config.n_layers)]
    for seq in sequences:
        _, inputs = trace_ssm_inputs(bundle, seq)
        for layer, ins in enumerate(inputs):
            per_layer[layer].append(np.asarray(ins.delta, dtype=np.float64))
    return per_layer


def collect_delta_stats(
    bundle: ModelBundle,
    sequences,
    clamp_percent: float,
) -> list[list[DeltaDistribution]]:
    """Vanilla forward over each sequence, pooling step sizes per channel.

    Returns distributions indexed [layer][channel], winsorized at the top
    clamp_percent per channel.
    """
    per_layer = _traces(bundle, sequences)
    out: list[list[DeltaDistribution]] = []
    for layer, deltas in enumerate(per_layer):
        pooled = np.concatenate(deltas, axis=0)  # (sum L, d_e)
        dists = [
            DeltaDistribution(
                layer=layer,
                channel=ch,
                samples=np.sort(winsorize(pooled[:, ch], clamp_percent)),
                clamp_percent=float(clamp_percent),
            )
            for ch in range(pooled.shape[1])
        ]
        out.append(dists)
    return out


def classify_layers(bundle: ModelBundle, sequences, theta: float) -> list[ChannelClassification]:
    """Classify every layer's channels from calibration-pass decay statistics."""
    per_layer = _traces(bundle, sequences)
    train_length = bundle.config.train_length
    out = []
    for layer, deltas in enumerate(per_layer):
        a = bundle.layers[layer].a.astype(np.float64)
        log_per_seq = np.stack(
            [log_mean_exp(d.sum(axis=0)[None, :] * a, axis=0) for d in deltas]
        )  # (n_seq, d_e)
        log_decay = log_mean_exp(log_per_seq, axis=0)
        with np.errstate(under="ignore"):
            decay = np.exp(log_decay)
        out.append(
            classify_channels(
                decay,
                theta,
                layer=layer,
                train_length=train_length,
                log_decay=log_decay,
            )
        )
    return out


def calibrate(
    bundle: ModelBundle,
    sequences,
    theta: float,
    clamp_percent: float,
    s_max: int,
    interval: int = 1000,
) -> tuple[ThresholdTable, list[ChannelClassification]]:
    """Full offline pipeline: classify channels, then build the g(S) table."""
    classifications = classify_layers(bundle, sequences, theta)
    dists = collect_delta_stats(bundle, sequences, clamp_percent)
    table = build_threshold_table(
        dists, classifications, bundle.config.train_length, s_max, interval
    )
    return table, classifications
