#!/usr/bin/env python3
"""Build a filtering-threshold table and check the mass alignment it encodes.

For a global channel, filtering keeps only tokens with step size >= g. The
solver picks g so that the kept step-size mass over a length-S input matches
the full mass the channel saw at its training length: after that, the
channel's end-to-end decay at length S looks like the decay it was trained
to handle.
"""

import numpy as np

from longssm import (
    DeltaProfile,
    ModelConfig,
    calibrate,
    collect_delta_stats,
    lookup,
    solve_threshold,
    synth_model,
)

train_len = 256
config = ModelConfig(
    vocab_size=128, d_model=16, d_inner=24, d_state=2, n_layers=1, train_length=train_len
)
bundle, planted = synth_model(
    config, 0.25, DeltaProfile(mean=0.25, spread=1.0), seed=11,
    global_a_range=(-0.048, -0.032),
)
streams = [np.random.default_rng(100 + i).integers(0, 128, train_len) for i in range(5)]

# --- the solver on one channel's empirical distribution ----------------------
dists = collect_delta_stats(bundle, streams, clamp_percent=0.0)
ch = int(np.flatnonzero(planted[0])[0])
samples = dists[0][ch].samples
m = samples.mean()
print(f"channel {ch}: {len(samples)} calibration samples, mean step {m:.4f}")
print(f"budget = train_length * mean = {train_len * m:.2f}\n")

for s in (512, 1024, 2048):
    g = solve_threshold(samples, train_len, s)
    kept = s * samples[samples >= g].sum() / len(samples)
    print(f"S={s:5d}: g={g:.4f}  expected kept mass {kept:6.2f} "
          f"(target {train_len * m:.2f})")

# --- full table over the interval grid ---------------------------------------
table, classifications = calibrate(
    bundle, streams, theta=5e-2, clamp_percent=0.0, s_max=3000, interval=1000
)
print(f"\ntable: interval={table.interval}, rows up to S={table.s_max}, "
      f"{len(table.layers[0])} global channels")
print(f"entries for channel {ch}:", table.layers[0][ch])

# lookups round to the nearest row and clamp at the edges
for s in (1499, 1500, 2700, 10**6):
    row = lookup(table, s)
    print(f"lookup(S={s}) -> g={row[0][ch]:.4f}")

# --- alignment quality on fresh data ------------------------------------------
# draws from the same model at 4x the training length should keep roughly the
# training-length mass on the filtered channel
s = 1024
g = dict(table.layers[0][ch])[1000]
kept_sums = []
for k in range(20):
    fresh = np.random.default_rng(900 + k).integers(0, 128, s)
    from longssm import trace_ssm_inputs

    _, layer_inputs = trace_ssm_inputs(bundle, fresh)
    d = layer_inputs[0].delta[:, ch]
    kept_sums.append(d[d >= g].sum())
print(f"\nfresh draws at S={s}: mean kept mass {np.mean(kept_sums):.2f}, "
      f"target {train_len * m:.2f}")
