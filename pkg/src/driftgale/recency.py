"""Self-supervised recency classification over unordered episode pairs.

D_orig is split into a random held-back "unseen" set plus "older" and
"recent" partitions by time. A network sees a pair (one older, one recent)
in random slot order and predicts which slot holds the recent one. At test
time each new episode is judged against an unseen partner, and the
correctness of that judgement feeds the exponential martingale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import nn
from .core import Rng, as_rng


@dataclass(frozen=True)
class RecencyConfig:
    hidden: tuple[int, ...] = (64,)
    learning_rate: float = 1e-4
    batch_size: int = 32
    initial_epochs: int = 20
    finetune_steps_per_episode: int = 5
    fractions: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    recent_window: Optional[int] = None
    symmetrize: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))


class SplitDatasets:
    """Unseen / older / recent partitions of the training episodes.

    The recent pool grows as test episodes arrive; with ``recent_window`` set
    only the newest ``recent_window`` recent episodes are sampled from.
    """

    def __init__(self, unseen_ids, unseen_x, older_ids, older_x, recent_ids, recent_x,
                 recent_window: Optional[int] = None):
        self.unseen_ids = np.asarray(unseen_ids, dtype=np.int64)
        self.unseen_x = np.asarray(unseen_x, dtype=np.float64)
        self.older_ids = np.asarray(older_ids, dtype=np.int64)
        self.older_x = np.asarray(older_x, dtype=np.float64)
        self.recent_window = recent_window
        recent_x = np.asarray(recent_x, dtype=np.float64)
        cap = max(64, 2 * len(recent_x))
        self._recent_x = np.empty((cap, self.dim))
        self._recent_ids = np.empty(cap, dtype=np.int64)
        self._n_recent = len(recent_x)
        self._recent_x[: self._n_recent] = recent_x
        self._recent_ids[: self._n_recent] = recent_ids

    @property
    def dim(self) -> int:
        return self.older_x.shape[1]

    @property
    def recent_x(self) -> np.ndarray:
        lo = 0 if self.recent_window is None else max(0, self._n_recent - self.recent_window)
        return self._recent_x[lo: self._n_recent]

    @property
    def recent_ids(self) -> np.ndarray:
        lo = 0 if self.recent_window is None else max(0, self._n_recent - self.recent_window)
        return self._recent_ids[lo: self._n_recent]

    @property
    def all_recent_ids(self) -> np.ndarray:
        return self._recent_ids[: self._n_recent]

    def sizes(self) -> tuple[int, int, int]:
        return len(self.unseen_ids), len(self.older_ids), self._n_recent

    def add_recent(self, ep_id: int, x: np.ndarray) -> None:
        if self._n_recent == len(self._recent_x):
            grow = len(self._recent_x) * 2
            self._recent_x = np.concatenate([self._recent_x, np.empty_like(self._recent_x)])[:grow]
            self._recent_ids = np.concatenate([self._recent_ids,
                                               np.empty_like(self._recent_ids)])[:grow]
        self._recent_x[self._n_recent] = x
        self._recent_ids[self._n_recent] = ep_id
        self._n_recent += 1


def _as_arrays(d_orig) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(d_orig, np.ndarray):
        x = np.asarray(d_orig, dtype=np.float64)
        return np.arange(len(x)), x
    eps = list(d_orig)
    if not eps:
        return np.empty(0, dtype=np.int64), np.empty((0, 0))
    return (np.array([e.id for e in eps], dtype=np.int64),
            np.stack([e.features for e in eps]))


def split_sizes(n: int, fractions) -> tuple[int, int, int]:
    f = np.asarray(fractions, dtype=np.float64)
    if f.shape != (3,) or np.any(f <= 0) or abs(f.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    n_unseen = int(round(n * f[0]))
    n_older = int(round(n * f[1]))
    n_recent = n - n_unseen - n_older
    if min(n_unseen, n_older, n_recent) < 1:
        raise ValueError(f"too few episodes ({n}) for fractions {tuple(f)}")
    return n_unseen, n_older, n_recent


def make_split(d_orig, fractions=(1 / 3, 1 / 3, 1 / 3), rng=0,
               recent_window: Optional[int] = None) -> SplitDatasets:
    ids, x = _as_arrays(d_orig)
    n_unseen, n_older, _ = split_sizes(len(ids), fractions)
    gen = as_rng(rng).generator
    order = np.argsort(ids, kind="stable")
    ids, x = ids[order], x[order]
    unseen = np.sort(gen.choice(len(ids), size=n_unseen, replace=False))
    rest = np.setdiff1d(np.arange(len(ids)), unseen)
    older, recent = rest[:n_older], rest[n_older:]
    return SplitDatasets(ids[unseen], x[unseen], ids[older], x[older], ids[recent], x[recent],
                         recent_window)


@dataclass
class PairExample:
    """Two episodes in random slot order; ``label`` = 1 means slot_b is the recent one."""

    slot_a: np.ndarray
    slot_b: np.ndarray
    label: int
    slot_bit: int
    older_id: Optional[int] = None
    recent_id: Optional[int] = None

    @property
    def features(self) -> np.ndarray:
        return np.concatenate([self.slot_a, self.slot_b])


def make_pair(older_x, recent_x, slot_bit: int, older_id=None, recent_id=None) -> PairExample:
    """Slot bit 0 puts the recent sample in slot_b (label 1); bit 1 puts it in slot_a."""
    if slot_bit == 0:
        return PairExample(np.asarray(older_x), np.asarray(recent_x), 1, 0, older_id, recent_id)
    return PairExample(np.asarray(recent_x), np.asarray(older_x), 0, 1, older_id, recent_id)


def sample_pair(older_pool, recent_pool, rng, slot_bit: Optional[int] = None) -> PairExample:
    older_pool = np.asarray(older_pool, dtype=np.float64)
    recent_pool = np.asarray(recent_pool, dtype=np.float64)
    if len(older_pool) == 0 or len(recent_pool) == 0:
        raise ValueError("cannot sample a pair from an empty pool")
    gen = as_rng(rng).generator
    i = int(gen.integers(len(older_pool)))
    j = int(gen.integers(len(recent_pool)))
    if slot_bit is None:
        slot_bit = int(gen.integers(2))
    return make_pair(older_pool[i], recent_pool[j], slot_bit, i, j)


def sample_pair_batch(older_x: np.ndarray, recent_x: np.ndarray, n: int,
                      gen: np.random.Generator):
    """``n`` slotted pairs as a ``(n, 2d)`` design matrix with labels."""
    if len(older_x) == 0 or len(recent_x) == 0:
        raise ValueError("cannot sample pairs from an empty pool")
    a = older_x[gen.integers(len(older_x), size=n)]
    b = recent_x[gen.integers(len(recent_x), size=n)]
    bits = gen.integers(0, 2, size=n)
    swap = (bits == 1)[:, None]
    left = np.where(swap, b, a)
    right = np.where(swap, a, b)
    return np.hstack([left, right]), (1 - bits).astype(np.float64)


class RecencyClassifier:
    """Trainable pair classifier ``f`` plus its Adam state."""

    def __init__(self, model: nn.MlpModel, adam: nn.AdamState, config: RecencyConfig):
        if model.d_in % 2:
            raise ValueError("pair classifier input dimension must be even")
        self.model = model
        self.adam = adam
        self.config = config

    @classmethod
    def create(cls, dim: int, config: RecencyConfig = RecencyConfig(), rng=0):
        dims = [2 * dim, *config.hidden, 1]
        model = nn.init_weights(dims, as_rng(rng))
        return cls(model, nn.AdamState.for_model(model, learning_rate=config.learning_rate),
                   config)

    @property
    def dim(self) -> int:
        return self.model.d_in // 2

    def predict_proba(self, pairs: np.ndarray) -> np.ndarray:
        pairs = np.atleast_2d(pairs)
        if pairs.shape[1] != self.model.d_in:
            raise ValueError(f"pair has {pairs.shape[1]} features, classifier expects "
                             f"{self.model.d_in}")
        p = nn.predict_proba(self.model, pairs)
        if self.config.symmetrize:
            d = self.dim
            swapped = np.hstack([pairs[:, d:], pairs[:, :d]])
            p = 0.5 * (p + 1.0 - nn.predict_proba(self.model, swapped))
        return p

    def predict_pair(self, pair: PairExample) -> tuple[int, int]:
        return predict_pair(self, pair)

    def train_steps(self, split: SplitDatasets, steps: int, gen: np.random.Generator) -> None:
        bs = self.config.batch_size
        older, recent = split.older_x, split.recent_x
        for _ in range(steps):
            x, y = sample_pair_batch(older, recent, bs, gen)
            self.model, self.adam, _ = nn.train_step(self.model, self.adam, x, y)

    def fit(self, split: SplitDatasets, rng) -> "RecencyClassifier":
        return train_initial(self, split, rng)

    def finetune(self, split: SplitDatasets, rng) -> "RecencyClassifier":
        return finetune_step(self, split, rng)


def train_initial(classifier: RecencyClassifier, split: SplitDatasets, rng) -> RecencyClassifier:
    """``initial_epochs`` passes; each pass draws max(|older|, |recent|) fresh pairs."""
    cfg = classifier.config
    if cfg.initial_epochs <= 0:
        return classifier
    gen = as_rng(rng).generator
    n_pairs = max(len(split.older_x), len(split.recent_x))
    steps_per_epoch = -(-n_pairs // cfg.batch_size)
    classifier.train_steps(split, cfg.initial_epochs * steps_per_epoch, gen)
    return classifier


def finetune_step(classifier: RecencyClassifier, split: SplitDatasets, rng) -> RecencyClassifier:
    steps = classifier.config.finetune_steps_per_episode
    if steps <= 0:
        return classifier
    if len(split.recent_x) == 0 or len(split.older_x) == 0:
        raise ValueError("fine-tuning needs nonempty older and recent pools")
    gen = rng.generator if isinstance(rng, Rng) else as_rng(rng).generator
    classifier.train_steps(split, steps, gen)
    return classifier


def predict_pair(classifier, pair: PairExample) -> tuple[int, int]:
    """(predicted label, correctness indicator); probability exactly 0.5 predicts 1."""
    prob = float(classifier.predict_proba(pair.features[None, :])[0])
    pred = 1 if prob >= 0.5 else 0
    return pred, int(pred == pair.label)


def pair_accuracy(classifier, older_x, recent_x, n: int, rng) -> float:
    """Fraction of ``n`` freshly slotted (older, recent) pairs judged correctly."""
    gen = as_rng(rng).generator
    x, y = sample_pair_batch(np.asarray(older_x, float), np.asarray(recent_x, float), n, gen)
    pred = (classifier.predict_proba(x) >= 0.5).astype(np.float64)
    return float(np.mean(pred == y))


class ScriptedClassifier:
    """Stub that is correct exactly when the next scripted indicator is 1."""

    def __init__(self, ys: Sequence[int]):
        self.ys = list(ys)
        self.calls = 0

    def predict_pair(self, pair: PairExample) -> tuple[int, int]:
        y = self.ys[self.calls]
        self.calls += 1
        pred = pair.label if y else 1 - pair.label
        return pred, int(y)

    def fit(self, split, rng):
        return self

    def finetune(self, split, rng):
        return self


class CoinFlipClassifier:
    """Stub that ignores its input and predicts a fair coin flip."""

    def __init__(self, rng, block: int = 1024):
        self._gen = as_rng(rng).generator
        self._block = block
        self._buf: list[int] = []

    def predict_pair(self, pair: PairExample) -> tuple[int, int]:
        if not self._buf:
            self._buf = self._gen.integers(0, 2, size=self._block).tolist()
        pred = self._buf.pop()
        return pred, int(pred == pair.label)

    def fit(self, split, rng):
        return self

    def finetune(self, split, rng):
        return self


class FixedModelClassifier:
    """Wraps an arbitrary callable ``pairs -> probabilities`` with no training."""

    def __init__(self, fn):
        self.fn = fn

    def predict_proba(self, pairs):
        return np.asarray(self.fn(np.atleast_2d(pairs)), dtype=np.float64)

    def predict_pair(self, pair):
        return predict_pair(self, pair)

    def fit(self, split, rng):
        return self

    def finetune(self, split, rng):
        return self
