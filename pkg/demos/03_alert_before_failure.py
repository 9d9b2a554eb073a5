"""Does the alarm ring before the downstream task breaks?

Run with ``python demos/03_alert_before_failure.py``. A few seconds.
"""

# %%
from driftgale.core import DetectorConfig
from driftgale.datagen import failure_index, failure_proxy, generate, render_clean
from driftgale.detector import fit, observe
from driftgale.harness import (FAILURE_FLOOR, FAILURE_RATE, IMAGE_CLASSIFIER, N_TRAIN,
                               brightness_generator)

# %% Centerline contrast is the task-health proxy. It falls linearly with brightness.
spec = brightness_generator(FAILURE_RATE)
for j in (0, 20, 40, 60, 80):
    mag = float(spec.schedule.magnitude(N_TRAIN + j))
    print(f"episode n0+{j:2d}: contrast {failure_proxy(render_clean(spec, mag), spec.family):.2f}")

fail = failure_index(spec, FAILURE_FLOOR, 500) - N_TRAIN
print(f"contrast reaches the {FAILURE_FLOOR} floor at episode n0+{fail}")

# %% Five deployments with different seeds.
# Deployment step n sees episode n0+n-1.
for seed in range(5):
    episodes = generate(brightness_generator(FAILURE_RATE, seed=seed), N_TRAIN + 100)
    det = fit("ours", episodes[:N_TRAIN],
              DetectorConfig(seed=seed, classifier_config=IMAGE_CLASSIFIER))
    for ep in episodes[N_TRAIN:]:
        value, fired = observe(det, ep)
        if fired:
            break
    step = det.alert.discovery_step
    margin = "no alert" if step is None else f"{fail - (step - 1)} episodes of warning"
    print(f"seed {seed}: alert at step {step} ({margin})")
