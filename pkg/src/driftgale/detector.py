"""One observe/report contract for the recency-martingale detector and the CM baselines.

``ours``
    Split D_orig, train the recency classifier, then for each test episode:
    draw an unseen partner, slot the pair at random, score the prediction,
    update the exponential martingale, add the episode to the recent pool
    and fine-tune. The prediction for episode j always precedes any training
    that uses episode j.
``cm`` / ``cm_fv``
    Nearest-neighbour conformal martingale on raw or PCA-projected features.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import __version__
from .conformal import ConformalMartingale, FeatureExtractor, fit_pca
from .core import DetectorConfig, Episode, EpisodeStream, Rng
from .martingale import AlertState, ExponentialMartingale, check_alert, display_value, update
from .recency import RecencyClassifier, make_pair, make_split

VARIANTS = ("ours", "cm", "cm_fv")


def normalize_variant(variant: str) -> str:
    v = variant.replace("-", "_").lower()
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of ours, cm, cm-fv")
    return v


@dataclass
class DetectionReport:
    """Per-step trace and discovery summary of one deployment."""

    variant: str
    stat_name: str
    steps: list = field(default_factory=list)
    episode_ids: list = field(default_factory=list)
    stats: list = field(default_factory=list)
    log_values: list = field(default_factory=list)
    discovery_step: Optional[int] = None
    shifted: Optional[bool] = None
    config: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return len(self.steps)

    @property
    def alerted(self) -> bool:
        return self.discovery_step is not None

    @property
    def false_negative(self) -> bool:
        return bool(self.shifted) and not self.alerted

    @property
    def values(self) -> list[float]:
        return [display_value(lv) for lv in self.log_values]

    def alerted_at(self, n: int) -> bool:
        return self.discovery_step is not None and n >= self.discovery_step

    def summary(self) -> dict:
        return {
            "variant": self.variant,
            "horizon": self.horizon,
            "discovery_step": self.discovery_step,
            "alerted": self.alerted,
            "shifted": self.shifted,
            "false_negative": self.false_negative,
            "final_log_value": self.log_values[-1] if self.log_values else 0.0,
            "flags": self.flags,
            "warnings": self.warnings,
            "config": self.config,
            "version": __version__,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", self.stat_name, "log_M", "M", "alerted"])
        for n, s, lv in zip(self.steps, self.stats, self.log_values):
            w.writerow([n, repr(s) if isinstance(s, float) else s, repr(lv),
                        repr(display_value(lv)), int(self.alerted_at(n))])
        return buf.getvalue()


class ShiftDetector:
    """A fitted detector; feed test episodes one at a time with :func:`observe`."""

    def __init__(self, variant: str, config: DetectorConfig):
        self.variant = normalize_variant(variant)
        self.config = config
        self.alert = AlertState(config.threshold_C)
        self.n = 0
        self.last_id: Optional[int] = None
        self.flags: dict = {}
        self.warnings: list = []
        self.pair_log: list = []
        root = Rng(config.seed)
        self._rng = {tag: root.split(tag) for tag in
                     ("split", "init", "train", "finetune", "partner", "slots", "conformal")}
        self.report = DetectionReport(self.variant, "y" if self.variant == "ours" else "p",
                                      config=config.to_dict())

    @property
    def log_value(self) -> float:
        if self.variant == "ours":
            return self.martingale.log_M
        return self.cm.betting.log_value

    @property
    def value(self) -> float:
        return display_value(self.log_value)

    # --- ours -----------------------------------------------------------
    def _fit_ours(self, d_orig, classifier) -> None:
        cfg = self.config.classifier_config
        self.split = make_split(d_orig, cfg.fractions, self._rng["split"], cfg.recent_window)
        if classifier is None:
            classifier = RecencyClassifier.create(self.split.dim, cfg, self._rng["init"])
        self.classifier = classifier.fit(self.split, self._rng["train"])
        self.martingale = ExponentialMartingale(self.config.martingale_params)
        n_unseen = len(self.split.unseen_ids)
        self._unseen_rows = list(self.split.unseen_x)
        self._unseen_ids = self.split.unseen_ids.tolist()
        self._partners = self._rng["partner"].generator.permutation(n_unseen).tolist()[::-1]
        self._recycled: list[int] = []
        self._slot_bits: list[int] = []

    def _next_partner(self) -> int:
        if self._partners:
            return self._partners.pop()
        if not self._recycled:
            if "recycled_from_step" not in self.flags:
                self.flags["recycled_partners"] = True
                self.flags["recycled_from_step"] = self.n
            gen = self._rng["partner"].generator
            self._recycled = gen.integers(len(self._unseen_ids), size=1024).tolist()
        return self._recycled.pop()

    def _next_slot_bit(self) -> int:
        if not self._slot_bits:
            self._slot_bits = self._rng["slots"].generator.integers(0, 2, size=1024).tolist()
        return self._slot_bits.pop()

    def _observe_ours(self, ep_id: int, x: np.ndarray) -> float:
        i = self._next_partner()
        bit = self._next_slot_bit()
        pair = make_pair(self._unseen_rows[i], x, bit, self._unseen_ids[i], ep_id)
        pred, y = self.classifier.predict_pair(pair)
        self.martingale = update(self.martingale, y)
        self.pair_log.append((self.n, ep_id, pair.older_id, bit, pred, y))
        self.split.add_recent(ep_id, x)
        self.classifier = self.classifier.finetune(self.split, self._rng["finetune"])
        return y

    # --- cm / cm_fv -----------------------------------------------------
    def _fit_cm(self, d_orig) -> None:
        x = d_orig if isinstance(d_orig, np.ndarray) else np.stack([e.features for e in d_orig])
        extractor = FeatureExtractor()
        if self.variant == "cm_fv":
            # Points used to fit the projection sit further out along its noisy
            # directions than fresh points do, so they are kept out of the bag.
            n_fit = int(round(self.config.pca_fit_fraction * len(x)))
            if n_fit and len(x) - n_fit < 1:
                raise ValueError("pca_fit_fraction leaves no training points for the bag")
            fit_rows = x
            if n_fit:
                perm = self._rng["split"].generator.permutation(len(x))
                fit_rows, x = x[np.sort(perm[:n_fit])], x[np.sort(perm[n_fit:])]
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                extractor = fit_pca(fit_rows, self.config.pca_k)
            self.warnings += [str(w.message) for w in caught]
        self.extractor = extractor
        self.cm = ConformalMartingale(x, extractor, self.config.threshold_C,
                                      self.config.grid_size, self._rng["conformal"])


def fit(variant: str, d_orig, config: Optional[DetectorConfig] = None,
        classifier=None) -> ShiftDetector:
    """Train-time setup. ``classifier`` injects a (possibly stubbed) recency classifier."""
    config = config or DetectorConfig()
    if isinstance(d_orig, EpisodeStream):
        d_orig = d_orig.to_list()
    if len(d_orig) == 0:
        raise ValueError("d_orig is empty")
    if not isinstance(d_orig, np.ndarray):
        ids = [e.id for e in d_orig]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError("d_orig must be in increasing id order")
    det = ShiftDetector(variant, config)
    if det.variant == "ours":
        det._fit_ours(d_orig, classifier)
    else:
        det._fit_cm(d_orig)
    det.report.warnings = det.warnings
    det.report.flags = det.flags
    return det


def observe(detector: ShiftDetector, episode) -> tuple[float, bool]:
    """Process one test episode; returns (martingale value, alert fired at this step)."""
    if isinstance(episode, Episode):
        ep_id, x = episode.id, episode.features
    else:
        ep_id, x = episode
        x = np.asarray(x, dtype=np.float64)
    if detector.last_id is not None and ep_id <= detector.last_id:
        raise ValueError(f"episode {ep_id} observed after {detector.last_id}: out of order")
    detector.last_id = ep_id
    detector.n += 1
    if detector.variant == "ours":
        stat = detector._observe_ours(ep_id, x)
        detector.alert = check_alert(detector.martingale, detector.alert)
        log_value = detector.martingale.log_M
    else:
        log_value, stat, detector.alert = detector.cm.step(x)
    fired = detector.alert.discovery_step == detector.n
    rep = detector.report
    rep.steps.append(detector.n)
    rep.episode_ids.append(ep_id)
    rep.stats.append(stat)
    rep.log_values.append(log_value)
    rep.discovery_step = detector.alert.discovery_step
    return display_value(log_value), fired


def _iter_stream(test_stream) -> Iterable:
    if isinstance(test_stream, np.ndarray):
        return ((i, row) for i, row in enumerate(test_stream))
    return iter(test_stream)


def run_deployment(detector: ShiftDetector, test_stream, horizon: int,
                   shifted: Optional[bool] = None) -> DetectionReport:
    """Observe up to ``horizon`` episodes and return the filled report.

    ``shifted`` labels the stream for false-negative bookkeeping.
    """
    if horizon > 0:
        it = _iter_stream(test_stream)
        for _ in range(horizon):
            try:
                ep = next(it)
            except StopIteration:
                break
            observe(detector, ep)
    rep = detector.report
    rep.shifted = shifted
    return rep
