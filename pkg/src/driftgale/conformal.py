"""Conformal-martingale baselines (CM and CM-FV).

Each incoming point is scored by its nearest-neighbour distance to the bag
of everything seen so far, turned into a smoothed conformal p-value, and fed
to a composite power martingale (the average over a grid of epsilon values
of prod_i eps * p_i ** (eps - 1)). CM works on raw features; CM-FV first
projects onto a PCA basis fitted on the training episodes.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .core import as_rng
from .martingale import AlertState, display_value


class NonconformityBag:
    """Points seen so far and their nearest-neighbour distances, kept exact on insert."""

    def __init__(self, points=None, dim: Optional[int] = None):
        if points is not None:
            points = np.atleast_2d(np.asarray(points, dtype=np.float64))
            dim = points.shape[1]
        if dim is None:
            raise ValueError("need initial points or a dimension")
        self.dim = dim
        self._x = np.empty((64, dim))
        self._scores = np.empty(64)
        self.n = 0
        if points is not None and len(points):
            self._bulk_init(points)

    def _bulk_init(self, points: np.ndarray) -> None:
        self._reserve(len(points))
        self._x[: len(points)] = points
        self.n = len(points)
        self._scores[: self.n] = brute_force_scores(points)

    def _reserve(self, extra: int) -> None:
        need = self.n + extra
        if need <= len(self._x):
            return
        cap = max(need, 2 * len(self._x))
        x = np.empty((cap, self.dim))
        s = np.empty(cap)
        x[: self.n] = self._x[: self.n]
        s[: self.n] = self._scores[: self.n]
        self._x, self._scores = x, s

    @property
    def points(self) -> np.ndarray:
        return self._x[: self.n]

    @property
    def scores(self) -> np.ndarray:
        return self._scores[: self.n]

    def __len__(self):
        return self.n

    def distances(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dim,):
            raise ValueError(f"point has shape {x.shape}, bag dimension is {self.dim}")
        diff = self.points - x
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))

    def insert(self, x, dists: Optional[np.ndarray] = None) -> float:
        """Add ``x``; returns its score and lowers neighbours' scores as needed."""
        if dists is None:
            dists = self.distances(x) if self.n else np.empty(0)
        alpha = float(dists.min()) if self.n else math.inf
        if self.n:
            np.minimum(self._scores[: self.n], dists, out=self._scores[: self.n])
        self._reserve(1)
        self._x[self.n] = x
        self._scores[self.n] = alpha
        self.n += 1
        return alpha


def brute_force_scores(points) -> np.ndarray:
    """O(n^2) nearest-neighbour distance of every point to the others."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n == 1:
        return np.array([math.inf])
    out = np.empty(n)
    for i in range(n):
        diff = points - points[i]
        d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        d[i] = math.inf
        out[i] = d.min()
    return out


def nonconformity(bag: NonconformityBag, x) -> float:
    if len(bag) == 0:
        raise ValueError("nonconformity of a point against an empty bag")
    return float(bag.distances(x).min())


def conformal_p(scores, theta: float) -> float:
    """Smoothed p-value of the last score among ``scores`` (which include it)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("empty score list")
    a = scores[-1]
    greater = int(np.count_nonzero(scores > a))
    equal = int(np.count_nonzero(scores == a))
    return (greater + theta * equal) / scores.size


@dataclass(frozen=True)
class BettingMartingale:
    epsilon_grid: np.ndarray
    per_epsilon_log_values: np.ndarray
    log_value: float = 0.0
    n: int = 0

    @classmethod
    def create(cls, grid_size: int = 100) -> "BettingMartingale":
        grid = np.arange(1, grid_size + 1, dtype=np.float64) / grid_size
        return cls(grid, np.zeros(grid_size), 0.0, 0)

    @property
    def value(self) -> float:
        return display_value(self.log_value)


def betting_update(bm: BettingMartingale, p: float) -> BettingMartingale:
    if not 0 < p <= 1:
        raise ValueError(f"p-value must lie in (0, 1], got {p}")
    eps = bm.epsilon_grid
    logs = bm.per_epsilon_log_values + np.log(eps) + (eps - 1.0) * math.log(p)
    log_value = float(logsumexp(logs) - math.log(len(eps)))
    return replace(bm, per_epsilon_log_values=logs, log_value=log_value, n=bm.n + 1)


@dataclass
class FeatureExtractor:
    kind: str = "identity"
    mean: Optional[np.ndarray] = None
    components: Optional[np.ndarray] = None  # (k, d), orthonormal rows
    explained_variance_ratio: Optional[np.ndarray] = None
    warnings: list = field(default_factory=list)

    @property
    def k(self) -> Optional[int]:
        return None if self.components is None else self.components.shape[0]

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "identity":
            return x
        return (x - self.mean) @ self.components.T


def fit_pca(training_points, k: int, rng=None) -> FeatureExtractor:
    """Top-``k`` principal directions of the centred training points.

    Each component is signed so that its largest-magnitude entry is positive.
    ``k`` larger than the data rank is clamped and a warning is recorded.
    ``rng`` is accepted for interface symmetry; the fit is deterministic.
    """
    x = np.asarray(training_points, dtype=np.float64)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if x.ndim != 2 or len(x) < 2:
        raise ValueError("need at least two training points")
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    tol = s.max(initial=0.0) * max(xc.shape) * np.finfo(float).eps
    rank = int(np.count_nonzero(s > tol))
    notes = []
    if len(x) < k + 1:
        msg = f"only {len(x)} training points for k={k}"
        notes.append(msg)
    if k > rank:
        msg = f"requested k={k} exceeds data rank {rank}; using k={max(rank, 1)}"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
        k = max(rank, 1)
    comps = vt[:k].copy()
    idx = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(k), idx])
    comps *= signs[:, None]
    var = s**2
    ratio = var[:k] / var.sum() if var.sum() > 0 else np.zeros(k)
    return FeatureExtractor("pca", mean, comps, ratio, notes)


class ConformalMartingale:
    """Per-deployment state of a CM or CM-FV detector."""

    def __init__(self, training_points, extractor: Optional[FeatureExtractor] = None,
                 threshold_C: float = 100.0, grid_size: int = 100, rng=0):
        self.extractor = extractor or FeatureExtractor()
        z = self.extractor.transform(np.asarray(training_points, dtype=np.float64))
        self.bag = NonconformityBag(z)
        self.betting = BettingMartingale.create(grid_size)
        self.alert = AlertState(threshold_C)
        self._gen = as_rng(rng).generator
        self._thetas: list[float] = []

    def _theta(self) -> float:
        if not self._thetas:
            # 1 - U lies in (0, 1], so p never hits 0
            self._thetas = (1.0 - self._gen.random(1024)).tolist()
        return self._thetas.pop()

    def step(self, x) -> tuple[float, float, AlertState]:
        """Score, p-value, bet and alert check for one point, then add it to the bag."""
        z = self.extractor.transform(np.asarray(x, dtype=np.float64))
        d = self.bag.distances(z)
        alpha = float(d.min())
        existing = np.minimum(self.bag.scores, d)
        greater = int(np.count_nonzero(existing > alpha))
        equal = int(np.count_nonzero(existing == alpha)) + 1
        p = (greater + self._theta() * equal) / (len(existing) + 1)
        self.betting = betting_update(self.betting, p)
        if not self.alert.alerted and self.betting.log_value >= self.alert.log_threshold:
            self.alert = replace(self.alert, discovery_step=self.betting.n)
        self.bag.insert(z, d)
        return self.betting.log_value, p, self.alert


def cm_observe(state: ConformalMartingale, episode) -> tuple[float, AlertState]:
    x = episode.features if hasattr(episode, "features") else episode
    state.step(x)
    return state.betting.value, state.alert
