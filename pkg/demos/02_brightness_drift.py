"""Three detectors watch a runway scene slowly get darker.

Run with ``python demos/02_brightness_drift.py [out.csv]``. A few seconds.
The optional argument receives a wide CSV of the three martingale traces.
"""

# %%
import sys

import numpy as np

from driftgale.core import DetectorConfig
from driftgale.datagen import base_scene, generate
from driftgale.detector import fit, run_deployment
from driftgale.harness import (IMAGE_CLASSIFIER, N_TRAIN, ORDERING_RATE, brightness_generator,
                               emit_trace_plot_data)

# %% The scene: gradient sky, dark runway, bright centerline, 16x16 pixels.
scene = base_scene()
for row in scene[::3]:
    print("".join(" .:-=+*#%@"[min(9, int(v * 10))] for v in row))

# %% Training episodes come from a fixed lighting level.
# After the change point brightness falls by 0.5% per episode.
spec = brightness_generator(ORDERING_RATE, seed=7)
episodes = generate(spec, N_TRAIN + 300)
train, test = episodes[:N_TRAIN], episodes[N_TRAIN:]
print(f"mean pixel: first test episode {test[0].features.mean():.3f}, "
      f"last {test[-1].features.mean():.3f}")

# %% Fit and deploy each variant on the same stream.
reports = []
for variant in ("ours", "cm_fv", "cm"):
    det = fit(variant, train, DetectorConfig(seed=7, classifier_config=IMAGE_CLASSIFIER))
    rep = run_deployment(det, test, 300, shifted=True)
    reports.append(rep)
    print(f"{variant:6s} alerts at step {rep.discovery_step}")

# %% Our correctness indicators: mostly coin flips early, mostly right later.
ys = np.array(reports[0].stats)
print("ours accuracy by 50-step block:", np.round(ys[: len(ys) // 50 * 50]
                                                   .reshape(-1, 50).mean(axis=1), 2))

# %%
if len(sys.argv) > 1:
    emit_trace_plot_data(reports, sys.argv[1])
    print("traces written to", sys.argv[1])
