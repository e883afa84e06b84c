"""Synthetic model generator with planted local/global channels.

Channels are planted by drawing each column of the decay matrix from one of
two magnitude populations: small-magnitude columns decay slowly (global
behavior), large-magnitude columns decay fast (local behavior). The step-size
projection is a per-channel affine map whose bias is solved by bisection on a
probe stream so that the mean step size hits the requested profile; the
expected cumulative decay of a planted channel over the training length is
then exp(A * train_length * profile.mean), a closed form the tests check
against.

The spread parameter shapes the step-size distribution: activations are half
saturated near zero (many tiny steps) with an upper tail a few units wide, so
a small fraction of tokens carries most of the step-size mass. That heavy
tail is what gives the threshold solver room to align kept mass at long
input lengths.

Defaults are tuned for train_length * mean step size of about 50: local
columns then decay below every threshold in the default search grid while
global columns stay above its upper end.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .manifest import LayerWeights, ModelBundle, ModelConfig
from .runtime import causal_conv, rms_norm, silu
from .ssm import SsmInputs, selective_scan, softplus

__all__ = ["DeltaProfile", "synth_model", "expected_decay"]

GLOBAL_A_RANGE = (-0.02, -0.001)
# Per-sequence step-size sums fluctuate around train_length * mean by tens of
# percent (heavy tail), so local columns carry enough magnitude that even a
# low draw keeps their decay below the entire threshold search grid.
LOCAL_A_RANGE = (-8.0, -4.0)
PROBE_LEN = 1024


@dataclass(frozen=True)
class DeltaProfile:
    """Target per-channel step-size statistics."""

    mean: float = 50.0 / 512.0
    spread: float = 3.0

    def __post_init__(self):
        if self.mean <= 0 or self.spread <= 0:
            raise ValueError("profile mean and spread must be positive")


def expected_decay(a_value: float, train_length: int, profile: DeltaProfile) -> float:
    """Closed-form planted decay from the generator's own parameters."""
    return float(np.exp(a_value * train_length * profile.mean))


def _solve_bias(x: np.ndarray, spread: float, target_mean: float) -> np.ndarray:
    """Per-channel bias b with mean(softplus(spread*x + b)) == target_mean."""
    d_e = x.shape[1]
    lo = np.full(d_e, -40.0)
    hi = np.full(d_e, 15.0)
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        mean = softplus(spread * x + mid[None, :]).mean(axis=0)
        too_big = mean > target_mean
        hi = np.where(too_big, mid, hi)
        lo = np.where(too_big, lo, mid)
    return 0.5 * (lo + hi)


def synth_model(
    config: ModelConfig,
    global_fraction: float,
    profile: DeltaProfile | None = None,
    seed: int = 0,
    global_a_range: tuple[float, float] = GLOBAL_A_RANGE,
    local_a_range: tuple[float, float] = LOCAL_A_RANGE,
) -> tuple[ModelBundle, list[np.ndarray]]:
    """Generate a model with planted global channels; returns (bundle, masks).

    ``masks`` holds one boolean (d_e,) array per layer, True on planted
    global channels. Deterministic per seed. The step-size projection needs
    a full-rank per-channel map, so the returned bundle always carries
    dt_rank == d_inner regardless of the incoming config.
    """
    if not 0.0 <= global_fraction <= 1.0:
        raise ValueError(f"global_fraction must lie in [0, 1], got {global_fraction}")
    for lo, hi in (global_a_range, local_a_range):
        if not (lo <= hi < 0):
            raise ValueError("decay ranges must be negative with lo <= hi")
    profile = profile or DeltaProfile()
    config = dataclasses.replace(config, dt_rank=config.d_inner)

    rng = np.random.default_rng(seed)
    c = config
    f32 = np.float32

    embedding = rng.normal(0.0, 1.0, (c.vocab_size, c.d_model)).astype(f32)
    probe = rng.integers(0, c.vocab_size, PROBE_LEN)
    n_global = int(round(global_fraction * c.d_inner))

    layers: list[LayerWeights] = []
    masks: list[np.ndarray] = []
    h = embedding[probe].astype(f32)
    for _ in range(c.n_layers):
        mask = np.zeros(c.d_inner, dtype=bool)
        mask[rng.permutation(c.d_inner)[:n_global]] = True
        a = np.empty((c.d_state, c.d_inner))
        a[:, mask] = rng.uniform(*global_a_range, (c.d_state, n_global))
        a[:, ~mask] = rng.uniform(*local_a_range, (c.d_state, c.d_inner - n_global))

        conv_weight = np.zeros((c.d_inner, c.conv_kernel), dtype=f32)
        conv_weight[:, -1] = 1.0  # current-token tap only
        lw = LayerWeights(
            in_proj=rng.normal(0, c.d_model**-0.5, (c.d_inner, c.d_model)).astype(f32),
            gate_proj=rng.normal(0, c.d_model**-0.5, (c.d_inner, c.d_model)).astype(f32),
            out_proj=rng.normal(0, c.d_inner**-0.5, (c.d_model, c.d_inner)).astype(f32),
            bc_proj=rng.normal(0, c.d_inner**-0.5, (2 * c.d_state, c.d_inner)).astype(f32),
            conv_weight=conv_weight,
            conv_bias=np.zeros(c.d_inner, dtype=f32),
            a=a.astype(f32),
            d=np.zeros(c.d_inner, dtype=f32),
            norm=np.ones(c.d_model, dtype=f32),
            delta_down=np.eye(c.d_inner, dtype=f32),
            delta_up=np.diag(np.full(c.d_inner, profile.spread)).astype(f32),
            delta_bias=np.zeros(c.d_inner, dtype=f32),
        )

        # Tune the step-size bias on this layer's actual activation statistics.
        block_in = rms_norm(h, lw.norm)
        u = block_in @ lw.in_proj.T
        x = silu(causal_conv(u, lw.conv_weight, lw.conv_bias))
        lw.delta_bias = _solve_bias(x.astype(np.float64), profile.spread, profile.mean).astype(f32)

        delta = softplus(profile.spread * x + lw.delta_bias)
        bc = x @ lw.bc_proj.T
        inputs = SsmInputs(x=x, delta=delta, b=bc[:, : c.d_state], c=bc[:, c.d_state :])
        y, _ = selective_scan(inputs, lw.a)
        gate = silu(block_in @ lw.gate_proj.T)
        h = h + (gate * (y + lw.d * x)) @ lw.out_proj.T

        layers.append(lw)
        masks.append(mask)

    bundle = ModelBundle(
        config=config,
        embedding=embedding,
        layers=layers,
        final_norm=np.ones(c.d_model, dtype=f32),
        lm_head=embedding,
    )
    return bundle, masks
