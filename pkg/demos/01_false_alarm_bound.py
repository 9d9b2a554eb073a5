"""Why a fair coin almost never raises an alarm.

Run with ``python demos/01_false_alarm_bound.py``. Takes a few seconds.
"""

# %%
import math

import numpy as np

from driftgale.core import Rng
from driftgale.martingale import (AlertState, ExponentialMartingale, check_alert,
                                  simulate_null, update)

# %% One step up, one step down.
# A correct judgement multiplies the wealth by 2e/(1+e), a wrong one by 2/(1+e).
m = ExponentialMartingale()
for y in (1, 0):
    m = update(m, y)
    print(f"after y={y}: M = {m.value:.6f}")

# %% Thirteen correct judgements in a row are enough to pass C = 100.
m, alert = ExponentialMartingale(), AlertState(100.0)
while not alert.alerted:
    m = update(m, 1)
    alert = check_alert(m, alert)
print(f"all-correct streak alerts at step {alert.discovery_step} (M = {m.value:.1f})")

# %% Under the null the judgements are coin flips.
# The chance of ever reaching C is at most 1/C, whatever the horizon.
for horizon in (50, 200, 500):
    frac, _ = simulate_null(ExponentialMartingale().params, horizon, 20_000, 100.0, Rng(horizon))
    print(f"horizon {horizon:3d}: crossing fraction {frac:.4f}  (bound 0.0100)")

# %% A classifier that is right 70% of the time crosses quickly.
frac, _ = simulate_null(ExponentialMartingale().params, 200, 2_000, 100.0, Rng(1), true_p=0.7)
print(f"70% accurate judgements: crossing fraction {frac:.3f} within 200 steps")

# %% Sample paths, for plotting elsewhere.
g = np.random.default_rng(0)
paths = np.cumsum(g.integers(0, 2, (5, 300)) - math.log((1 + math.e) / 2), axis=1)
print("max log M over five null paths:", np.round(paths.max(axis=1), 2))
