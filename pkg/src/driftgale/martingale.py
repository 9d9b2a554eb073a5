"""Exponential Bernoulli martingale over classifier-correctness indicators.

The process is

    M_n = exp(t * S_n) / (q + p * exp(t)) ** n,     S_n = y_1 + ... + y_n

and is tracked in log space. Under the null each y_k ~ Bernoulli(p), M_n is a
nonnegative martingale with M_0 = 1, so Doob's maximal inequality bounds the
probability of ever reaching ``C`` by ``1 / C``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Optional

import numpy as np

from .core import as_rng

LOG_DISPLAY_CAP = 700.0


@dataclass(frozen=True)
class MartingaleParams:
    t: float = 1.0
    p: float = 0.5

    def __post_init__(self):
        if not self.t > 0:
            raise ValueError(f"t must be positive, got {self.t}")
        if not 0 < self.p < 1:
            raise ValueError(f"p must lie in (0, 1), got {self.p}")

    @property
    def q(self) -> float:
        return 1.0 - self.p

    @cached_property
    def log_norm(self) -> float:
        """ln(q + p e^t), the per-step normaliser."""
        return math.log(self.q + self.p * math.exp(self.t))


@dataclass(frozen=True)
class ExponentialMartingale:
    params: MartingaleParams = MartingaleParams()
    n: int = 0
    S_n: int = 0
    log_M: float = 0.0

    @property
    def value(self) -> float:
        return display_value(self.log_M)

    def closed_form(self) -> float:
        """log M_n recomputed from (n, S_n)."""
        return self.params.t * self.S_n - self.n * self.params.log_norm


@dataclass(frozen=True)
class AlertState:
    threshold_C: float = 100.0
    discovery_step: Optional[int] = None

    @property
    def alerted(self) -> bool:
        return self.discovery_step is not None

    @cached_property
    def log_threshold(self) -> float:
        return math.log(self.threshold_C)


def display_value(log_value: float) -> float:
    """exp(log_value), reported as +inf above exp(700)."""
    if log_value > LOG_DISPLAY_CAP:
        return math.inf
    return math.exp(log_value)


def update(m: ExponentialMartingale, y: int) -> ExponentialMartingale:
    if y not in (0, 1):
        raise ValueError(f"y must be 0 or 1, got {y!r}")
    y = int(y)
    prm = m.params
    n, s = m.n + 1, m.S_n + y
    # rebuilt from the exact counts so rounding never accumulates over long streams
    return ExponentialMartingale(prm, n, s, prm.t * s - n * prm.log_norm)


def check_alert(m: ExponentialMartingale, a: AlertState) -> AlertState:
    if a.alerted or m.log_M < a.log_threshold:
        return a
    return replace(a, discovery_step=m.n)


def crossing_step(log_increment: float, threshold_C: float) -> int:
    """Number of identical steps of size ``log_increment`` needed to reach ``threshold_C``."""
    if log_increment <= 0:
        raise ValueError("increment must be positive to ever cross")
    return max(1, math.ceil(math.log(threshold_C) / log_increment))


def log_paths(ys: np.ndarray, params: MartingaleParams = MartingaleParams()) -> np.ndarray:
    """Vectorised log M_1..M_N for a (trials, N) array of indicators.

    Uses the same count-based formula as :func:`update`.
    """
    ys = np.asarray(ys)
    s = np.cumsum(ys, axis=-1, dtype=np.int64)
    n = np.arange(1, ys.shape[-1] + 1)
    return params.t * s - n * params.log_norm


def first_crossing(log_path: np.ndarray, threshold_C: float) -> np.ndarray:
    """1-based first index with log M >= ln C per row, 0 where none."""
    hit = np.asarray(log_path) >= math.log(threshold_C)
    any_hit = hit.any(axis=-1)
    first = hit.argmax(axis=-1) + 1
    return np.where(any_hit, first, 0)


def simulate_null(params: MartingaleParams, horizon_N: int, trials: int, C: float,
                  rng, true_p: Optional[float] = None, chunk: int = 20000):
    """Monte Carlo check of the maximal inequality.

    Streams are i.i.d. Bernoulli(``true_p``) (default: ``params.p``) and are
    scored with ``params``. Returns ``(crossing_fraction, mean_final_value)``.
    """
    if horizon_N < 1 or trials < 1:
        raise ValueError("horizon_N and trials must be >= 1")
    gen = as_rng(rng).generator
    p_draw = params.p if true_p is None else true_p
    crossings = 0
    final_sum = 0.0
    done = 0
    while done < trials:
        b = min(chunk, trials - done)
        ys = (gen.random((b, horizon_N)) < p_draw).astype(np.int8)
        paths = log_paths(ys, params)
        crossings += int((first_crossing(paths, C) > 0).sum())
        final_sum += float(np.exp(paths[:, -1]).sum())
        done += b
    return crossings / trials, final_sum / trials


def one_step_ratios(params: MartingaleParams, prefix, samples: int, rng) -> np.ndarray:
    """Draws of M_{n+1}/M_n after a fixed indicator prefix, via :func:`update`.

    The next indicator is Bernoulli(params.p), independent of the prefix.
    """
    gen = as_rng(rng).generator
    m = ExponentialMartingale(params)
    for y in prefix:
        m = update(m, y)
    up, down = update(m, 1), update(m, 0)
    r1, r0 = math.exp(up.log_M - m.log_M), math.exp(down.log_M - m.log_M)
    ys = gen.random(samples) < params.p
    return np.where(ys, r1, r0)


def trace_rows(ys, log_values, discovery_step):
    """Rows of the per-step trace ``n,y,log_M,M,alerted``."""
    rows = []
    for n, (y, lv) in enumerate(zip(ys, log_values), start=1):
        alerted = discovery_step is not None and n >= discovery_step
        rows.append((n, y, lv, display_value(lv), int(alerted)))
    return rows
