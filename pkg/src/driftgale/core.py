"""Shared types: episodes, streams, detector configuration and seeded randomness."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np


class StreamFormatError(ValueError):
    """Raised when an episode file cannot be parsed or violates the record contract."""


@dataclass(frozen=True)
class Episode:
    """One deployment episode, summarised by a single feature vector.

    ``shape`` is optional metadata for image-like data that was flattened
    row-major into ``features``.
    """

    id: int
    features: np.ndarray
    shape: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(x)):
            raise ValueError(f"episode {self.id}: non-finite feature value")
        if self.shape is not None:
            shape = tuple(int(s) for s in self.shape)
            if math.prod(shape) != x.size:
                raise ValueError(
                    f"episode {self.id}: shape {shape} does not match {x.size} features"
                )
            object.__setattr__(self, "shape", shape)
        x.setflags(write=False)
        object.__setattr__(self, "features", x)

    @property
    def dim(self) -> int:
        return self.features.size


class EpisodeStream:
    """Iterable of episodes in strictly increasing id order.

    ``label`` is ``"train"`` for D_orig-style data and ``"test"`` for data
    observed at deployment.
    """

    def __init__(self, source: Iterable[Episode], label: str = "test"):
        if label not in ("train", "test"):
            raise ValueError(f"label must be 'train' or 'test', got {label!r}")
        self.source = source
        self.label = label

    def __iter__(self) -> Iterator[Episode]:
        last = None
        for ep in self.source:
            if last is not None and ep.id <= last:
                raise ValueError(f"episode ids out of order: {ep.id} after {last}")
            last = ep.id
            yield ep

    def to_list(self) -> list[Episode]:
        return list(self)

    @classmethod
    def from_array(cls, features: np.ndarray, label: str = "test", start_id: int = 0,
                   shape=None) -> "EpisodeStream":
        features = np.asarray(features, dtype=np.float64)
        eps = [Episode(start_id + i, row, shape) for i, row in enumerate(features)]
        return cls(eps, label)


def episodes_to_array(episodes: Sequence[Episode]) -> np.ndarray:
    if len(episodes) == 0:
        raise ValueError("no episodes")
    dims = {ep.dim for ep in episodes}
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature dimensions: {sorted(dims)}")
    return np.stack([ep.features for ep in episodes])


def load_stream(path, format: Optional[str] = None, label: str = "test") -> EpisodeStream:
    """Read an episode file (JSONL or CSV) into a validated stream.

    Records are validated eagerly so that errors carry the 1-based record
    number. An empty file yields an empty stream.
    """
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "jsonl"
    if format not in ("jsonl", "csv"):
        raise ValueError(f"unsupported format {format!r}")

    episodes: list[Episode] = []
    dim = None

    def add(row_no, ep_id, feats, shape):
        nonlocal dim
        try:
            feats = np.asarray(feats, dtype=np.float64)
        except (TypeError, ValueError) as e:
            raise StreamFormatError(f"row {row_no}: bad features ({e})") from None
        if feats.ndim != 1:
            raise StreamFormatError(f"row {row_no}: features must be a flat list")
        if dim is None:
            dim = feats.size
        elif feats.size != dim:
            raise StreamFormatError(
                f"row {row_no}: dimension mismatch, expected {dim} features, got {feats.size}"
            )
        if not np.all(np.isfinite(feats)):
            raise StreamFormatError(f"row {row_no}: non-finite feature value")
        if episodes and ep_id <= episodes[-1].id:
            raise StreamFormatError(f"row {row_no}: id {ep_id} is not increasing")
        try:
            episodes.append(Episode(ep_id, feats, shape))
        except ValueError as e:
            raise StreamFormatError(f"row {row_no}: {e}") from None

    with path.open(newline="") as fh:
        if format == "jsonl":
            row_no = 0
            for line in fh:
                if not line.strip():
                    continue
                row_no += 1
                try:
                    rec = json.loads(line)
                    ep_id = int(rec["id"])
                    feats = rec["features"]
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                    raise StreamFormatError(f"row {row_no}: malformed record ({e})") from None
                add(row_no, ep_id, feats, rec.get("shape"))
        else:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is not None and (not header or header[0].strip() != "id"):
                raise StreamFormatError("row 0: CSV header must start with 'id'")
            for row_no, row in enumerate(reader, start=1):
                if not row:
                    continue
                try:
                    ep_id = int(row[0])
                    feats = [float(v) for v in row[1:]]
                except ValueError as e:
                    raise StreamFormatError(f"row {row_no}: malformed record ({e})") from None
                add(row_no, ep_id, feats, None)

    return EpisodeStream(episodes, label)


def write_stream(episodes: Iterable[Episode], path, format: Optional[str] = None) -> None:
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "jsonl"
    episodes = list(episodes)
    with path.open("w", newline="") as fh:
        if format == "jsonl":
            for ep in episodes:
                rec = {"id": ep.id, "features": ep.features.tolist()}
                if ep.shape is not None:
                    rec["shape"] = list(ep.shape)
                fh.write(json.dumps(rec) + "\n")
        elif format == "csv":
            w = csv.writer(fh)
            dim = episodes[0].dim if episodes else 0
            w.writerow(["id"] + [f"f{i}" for i in range(dim)])
            for ep in episodes:
                w.writerow([ep.id] + [repr(float(v)) for v in ep.features])
        else:
            raise ValueError(f"unsupported format {format!r}")


def _tag_key(tag: str) -> int:
    digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Seeded, splittable generator backed by the counter-based Philox bit generator.

    Children are derived from ``(seed, path of tags)`` only, never from how
    much of the parent stream has been consumed, so ``split`` is reproducible
    no matter when it is called.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed) & (2**64 - 1)
        self.path = tuple(path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def split(self, tag: str) -> "Rng":
        return split_rng(self, tag)

    def derive_seed(self) -> int:
        """A 63-bit integer seed drawn from this generator."""
        return int(self.generator.integers(0, 2**63 - 1))

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"


def split_rng(rng: Rng, purpose_tag: str) -> Rng:
    if not purpose_tag:
        raise ValueError("purpose_tag must be nonempty")
    return Rng(rng.seed, rng.path + (_tag_key(purpose_tag),))


def as_rng(rng) -> Rng:
    if isinstance(rng, Rng):
        return rng
    return Rng(int(rng))


@dataclass(frozen=True)
class DetectorConfig:
    """Alert threshold, seed and per-variant hyperparameters for one detector."""

    threshold_C: float = 100.0
    seed: int = 0
    classifier_config: Optional[object] = None
    martingale_params: Optional[object] = None
    pca_k: int = 16
    pca_fit_fraction: float = 0.5
    grid_size: int = 100
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.threshold_C > 1:
            raise ValueError(f"threshold_C must exceed 1, got {self.threshold_C}")
        if not 0 <= self.pca_fit_fraction < 1:
            raise ValueError("pca_fit_fraction must lie in [0, 1)")
        if self.classifier_config is None:
            from .recency import RecencyConfig
            object.__setattr__(self, "classifier_config", RecencyConfig())
        if self.martingale_params is None:
            from .martingale import MartingaleParams
            object.__setattr__(self, "martingale_params", MartingaleParams())

    @property
    def epsilon(self) -> float:
        return 1.0 / self.threshold_C

    def to_dict(self) -> dict:
        from dataclasses import asdict
        return {
            "threshold_C": self.threshold_C,
            "epsilon": self.epsilon,
            "seed": self.seed,
            "classifier_config": asdict(self.classifier_config),
            "martingale_params": asdict(self.martingale_params),
            "pca_k": self.pca_k,
            "pca_fit_fraction": self.pca_fit_fraction,
            "grid_size": self.grid_size,
            "extra": dict(self.extra),
        }
