"""Multi-trial experiments, summary tables and plot-ready traces.

Every experiment is described by an :class:`ExperimentSpec` (loadable from
JSON) and run by :func:`run_experiment`, which derives one child generator
per trial from the master seed. Aggregates are reduced by trial index, so
they do not depend on the number of worker threads.

Experiment kinds
----------------
fpr_null
    Unshifted streams; reports the alert fraction of each variant.
detection_ordering
    Shifted streams; reports discovery times and false-negative rates.
alert_before_failure
    Shifted streams plus a failure floor on the task-health proxy; counts
    trials whose alert precedes the first failing episode.
martingale_doob
    Monte Carlo of the exponential martingale on i.i.d. fair-coin indicators.
fair_coin
    Accuracy of fixed classifiers on exchangeable pairs.
gradcheck
    Analytic vs finite-difference gradients on random MLPs.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, nn
from .core import DetectorConfig, Rng
from .datagen import GeneratorSpec, ShiftSchedule, failure_index, generate
from .detector import DetectionReport, fit, normalize_variant, observe
from .martingale import MartingaleParams, simulate_null
from .recency import (CoinFlipClassifier, RecencyClassifier, RecencyConfig, SplitDatasets,
                      pair_accuracy)

EXPERIMENTS = ("fpr_null", "detection_ordering", "alert_before_failure",
               "martingale_doob", "fair_coin", "gradcheck")
STREAM_EXPERIMENTS = ("fpr_null", "detection_ordering", "alert_before_failure")
FAILURE_FNR = 0.95


def _num(x):
    """JSON-safe number: non-finite floats become strings."""
    if isinstance(x, float) and not math.isfinite(x):
        return "inf" if x > 0 else ("-inf" if x < 0 else "nan")
    return x


@dataclass(frozen=True)
class ExperimentSpec:
    """One experiment: what to run, how many trials, and with which seed.

    ``n_train`` episodes form D_orig, the next ``horizon`` are the test
    stream. ``stub`` replaces the recency classifier of ``ours`` with a fair
    coin ("coin"). ``stop_on_alert`` ends a trial at its first alert, which
    leaves discovery times and error rates unchanged.
    """

    name: str
    trials: int = 100
    seed: int = 0
    variants: tuple[str, ...] = ("ours",)
    generator: Optional[GeneratorSpec] = None
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    n_train: int = 600
    horizon: int = 500
    stop_on_alert: bool = True
    failure_floor: Optional[float] = None
    stub: Optional[str] = None
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.name!r}; expected one of {EXPERIMENTS}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        object.__setattr__(self, "variants", tuple(normalize_variant(v) for v in self.variants))
        if self.stub not in (None, "coin"):
            raise ValueError(f"unknown stub {self.stub!r}")
        if self.name in STREAM_EXPERIMENTS:
            if self.generator is None:
                raise ValueError(f"experiment {self.name} needs a generator")
            if self.n_train < 3 or self.horizon < 1:
                raise ValueError("need n_train >= 3 and horizon >= 1")
        if self.name == "alert_before_failure" and self.failure_floor is None:
            raise ValueError("alert_before_failure needs failure_floor")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "trials": self.trials,
            "seed": self.seed,
            "variants": list(self.variants),
            "generator": None if self.generator is None else self.generator.to_dict(),
            "detector": self.detector.to_dict(),
            "n_train": self.n_train,
            "horizon": self.horizon,
            "stop_on_alert": self.stop_on_alert,
            "failure_floor": self.failure_floor,
            "stub": self.stub,
            "options": dict(self.options),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        if d.get("generator") is not None:
            d["generator"] = GeneratorSpec.from_dict(d["generator"])
        if "detector" in d:
            d["detector"] = detector_config_from_dict(d["detector"])
        if "variants" in d:
            d["variants"] = tuple(d["variants"])
        return cls(**d)


def detector_config_from_dict(d: dict) -> DetectorConfig:
    d = {k: v for k, v in dict(d).items() if k != "epsilon"}
    if isinstance(d.get("classifier_config"), dict):
        cc = dict(d["classifier_config"])
        for key in ("hidden", "fractions"):
            if key in cc:
                cc[key] = tuple(cc[key])
        d["classifier_config"] = RecencyConfig(**cc)
    if isinstance(d.get("martingale_params"), dict):
        d["martingale_params"] = MartingaleParams(**d["martingale_params"])
    return DetectorConfig(**d)


def load_experiment_spec(path) -> ExperimentSpec:
    return ExperimentSpec.from_dict(json.loads(Path(path).read_text()))


# --- scenario defaults ------------------------------------------------------

# Image scenario: 16x16 runway scene, pixel noise 0.4, 10% lighting jitter.
BRIGHTNESS_NOISE = 0.4
BRIGHTNESS_JITTER = 0.1
ORDERING_RATE = 0.005
FAILURE_RATE = 0.01
FAILURE_FLOOR = 0.4
N_TRAIN = 600

# Recency classifier used for the image scenarios.
IMAGE_CLASSIFIER = RecencyConfig(hidden=(32,), learning_rate=1e-4, initial_epochs=5,
                                 finetune_steps_per_episode=20, recent_window=5,
                                 symmetrize=True)


def brightness_generator(rate: float, change_point: int = N_TRAIN, seed: int = 0) -> GeneratorSpec:
    return GeneratorSpec(family="synthetic_image_brightness", noise_scale=BRIGHTNESS_NOISE,
                         lighting_jitter=BRIGHTNESS_JITTER,
                         schedule=ShiftSchedule("gradual_linear", change_point, rate), seed=seed)


def default_spec(name: str, trials: Optional[int] = None, seed: int = 0) -> ExperimentSpec:
    """The reference configuration of each experiment kind."""
    image_det = DetectorConfig(classifier_config=IMAGE_CLASSIFIER)
    if name == "fpr_null":
        gen = GeneratorSpec(family="gaussian_mean_drift", dim=8, noise_scale=1.0)
        return ExperimentSpec(name, trials or 300, seed, ("ours",), gen,
                              DetectorConfig(), n_train=300, horizon=200)
    if name == "detection_ordering":
        return ExperimentSpec(name, trials or 100, seed, ("ours", "cm_fv", "cm"),
                              brightness_generator(ORDERING_RATE), image_det,
                              n_train=N_TRAIN, horizon=500)
    if name == "alert_before_failure":
        return ExperimentSpec(name, trials or 100, seed, ("ours",),
                              brightness_generator(FAILURE_RATE), image_det,
                              n_train=N_TRAIN, horizon=500, failure_floor=FAILURE_FLOOR)
    if name == "martingale_doob":
        return ExperimentSpec(name, trials or 10_000, seed, horizon=500)
    if name == "fair_coin":
        return ExperimentSpec(name, trials or 10_000, seed, options={"dim": 8})
    if name == "gradcheck":
        return ExperimentSpec(name, trials or 20, seed, options={"layer_dims": [6, 5, 4, 3, 1],
                                                                  "batch": 8})
    raise ValueError(f"unknown experiment {name!r}")


# --- summary ----------------------------------------------------------------

@dataclass
class SummaryRow:
    variant: str
    trials: int
    alerts: int
    mean_discovery: Optional[float]
    median_discovery: float
    false_negative_rate: Optional[float]
    false_positive_rate: Optional[float]
    status: str = "ok"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: _num(v) for k, v in d.items()}


@dataclass
class SummaryTable:
    """Per-variant rows plus experiment-level metrics.

    ``mean_discovery`` averages over successful alerts only and is withheld
    (``status == "failure"``) when the false-negative rate reaches 95%.
    ``median_discovery`` counts missed alerts as +inf.
    """

    experiment: str
    rows: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    version: str = __version__

    def row(self, variant: str) -> SummaryRow:
        for r in self.rows:
            if r.variant == variant:
                return r
        raise KeyError(variant)

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "rows": [r.to_dict() for r in self.rows],
            "metrics": {k: _num(v) for k, v in self.metrics.items()},
            "config": self.config,
            "version": self.version,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "trials", "alerts", "mean_discovery", "median_discovery",
                    "false_negative_rate", "false_positive_rate", "status"])
        for r in self.rows:
            w.writerow([r.variant, r.trials, r.alerts, _fmt(r.mean_discovery),
                        _fmt(r.median_discovery), _fmt(r.false_negative_rate),
                        _fmt(r.false_positive_rate), r.status])
        return buf.getvalue()


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x)) if isinstance(x, float) else str(x)


def summarize_discoveries(variant: str, discoveries: Sequence[Optional[int]],
                          shifted: bool) -> SummaryRow:
    """Reduce per-trial discovery steps (None = no alert) to one table row."""
    n = len(discoveries)
    hits = [d for d in discoveries if d is not None]
    times = np.array([math.inf if d is None else d for d in discoveries], dtype=float)
    median = float(np.median(times)) if n else math.inf
    miss_rate = 1.0 - len(hits) / n if n else 0.0
    if shifted:
        fnr, fpr = miss_rate, None
        status = "failure" if fnr >= FAILURE_FNR else "ok"
    else:
        fnr, fpr = None, len(hits) / n if n else 0.0
        status = "ok"
    mean = float(np.mean(hits)) if hits and status == "ok" else None
    return SummaryRow(variant, n, len(hits), mean, median, fnr, fpr, status)


# --- trials -------------------------------------------------------------------

@dataclass
class TrialResult:
    index: int
    reports: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    error: Optional[str] = None


def trial_rng(spec: ExperimentSpec, index: int) -> Rng:
    return Rng(spec.seed).split(f"{spec.name}/trial-{index}")


def _run_stream_trial(spec: ExperimentSpec, index: int, shared=None) -> TrialResult:
    rng = trial_rng(spec, index)
    if shared is not None:
        episodes = shared
    else:
        gen_spec = replace(spec.generator, seed=rng.split("data").derive_seed())
        episodes = generate(gen_spec, spec.n_train + spec.horizon)
    d_orig, test = episodes[: spec.n_train], episodes[spec.n_train:]
    shifted = spec.name != "fpr_null"
    out = TrialResult(index)
    for variant in spec.variants:
        seed = rng.split(f"detector-{variant}").derive_seed()
        config = replace(spec.detector, seed=seed)
        classifier = None
        if spec.stub == "coin" and variant == "ours":
            classifier = CoinFlipClassifier(rng.split("coin"))
        det = fit(variant, d_orig, config, classifier=classifier)
        for ep in test[: spec.horizon]:
            _, fired = observe(det, ep)
            if fired and spec.stop_on_alert:
                break
        det.report.shifted = shifted
        out.reports[variant] = det.report
    return out


def _run_doob_trials(spec: ExperimentSpec) -> dict:
    params = spec.detector.martingale_params
    frac, mean_final = simulate_null(params, spec.horizon, spec.trials,
                                     spec.detector.threshold_C, trial_rng(spec, 0),
                                     true_p=spec.options.get("true_p"))
    return {"crossing_fraction": frac, "mean_final_value": mean_final,
            "bound": 1.0 / spec.detector.threshold_C}


def fair_coin_classifiers(dim: int, rng: Rng) -> dict:
    """Zero net, random net, and a net trained on a different (separable) problem."""
    dims = [2 * dim, 16, 1]
    zero = RecencyClassifier(nn.zero_model(dims), nn.AdamState(), RecencyConfig(hidden=(16,)))
    rand = RecencyClassifier.create(dim, RecencyConfig(hidden=(16,)), rng.split("random-net"))
    g = rng.split("other-data").generator
    ids = np.arange(450)
    split = SplitDatasets(ids[:150], g.standard_normal((150, dim)),
                          ids[150:300], g.standard_normal((150, dim)),
                          ids[300:], g.standard_normal((150, dim)) + 3.0)
    trained = RecencyClassifier.create(dim, RecencyConfig(hidden=(16,), initial_epochs=30),
                                       rng.split("trained-init"))
    trained = trained.fit(split, rng.split("trained-fit"))
    return {"zero": zero, "random": rand, "trained_elsewhere": trained}


def _run_fair_coin(spec: ExperimentSpec) -> dict:
    dim = int(spec.options.get("dim", 8))
    rng = trial_rng(spec, 0)
    data = rng.split("stream").generator.standard_normal((2 * spec.trials, dim))
    older, recent = data[: spec.trials], data[spec.trials:]
    out = {}
    for name, clf in fair_coin_classifiers(dim, rng.split("classifiers")).items():
        out[name] = pair_accuracy(clf, older, recent, spec.trials, rng.split(f"pairs-{name}"))
    half = 3.0 * math.sqrt(0.25 / spec.trials)
    out["band"] = [0.5 - half, 0.5 + half]
    return out


def random_mlp(dims, rng: Rng, bias_scale: float = 0.1) -> nn.MlpModel:
    """He-initialised MLP with small random biases.

    With zero biases a unit whose inputs are all dead sits exactly on the ReLU
    kink, where central differences are meaningless.
    """
    model = nn.init_weights(dims, rng)
    gen = rng.split("biases").generator
    biases = [bias_scale * gen.standard_normal(b.shape) for b in model.biases]
    return nn.MlpModel(list(dims), model.weights, biases)


def _run_gradcheck(spec: ExperimentSpec) -> dict:
    dims = list(spec.options.get("layer_dims", [6, 5, 4, 3, 1]))
    batch = int(spec.options.get("batch", 8))
    errs = []
    for i in range(spec.trials):
        g = trial_rng(spec, i)
        model = random_mlp(dims, g.split("init"))
        gen = g.split("data").generator
        x = gen.standard_normal((batch, dims[0]))
        y = gen.integers(0, 2, batch).astype(float)
        errs.append(nn.gradient_check(model, x, y))
    return {"max_relative_error": max(errs), "per_seed": errs}


# --- driver -----------------------------------------------------------------

@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    summary: SummaryTable
    trials: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)


def run_experiment(spec: ExperimentSpec, out_dir=None, jobs: int = 1) -> ExperimentResult:
    """Run all trials of ``spec`` and write artifacts to ``out_dir`` if given.

    Artifacts: ``summary.json``, ``summary.csv`` and, for stream experiments,
    ``trials.csv`` (one line per trial and variant) and ``traces.csv``. If a
    trial raises, the completed trials are still written with the failed ones
    marked, and the error is re-raised.
    """
    summary = SummaryTable(spec.name, config=spec.to_dict())
    result = ExperimentResult(spec, summary)
    if spec.name == "martingale_doob":
        summary.metrics = _run_doob_trials(spec)
    elif spec.name == "fair_coin":
        summary.metrics = _run_fair_coin(spec)
    elif spec.name == "gradcheck":
        summary.metrics = _run_gradcheck(spec)
    else:
        shared = None
        if spec.stub == "coin":
            # a coin-flip classifier never looks at the data, so one stream serves all trials
            gen_spec = replace(spec.generator,
                               seed=Rng(spec.seed).split("shared-data").derive_seed())
            shared = generate(gen_spec, spec.n_train + spec.horizon)
        result.trials = _run_trials(spec, jobs, shared)
        failed = [t for t in result.trials if t.error is not None]
        _summarize_streams(spec, result)
        if failed:
            summary.metrics["failed_trials"] = [t.index for t in failed]
            if out_dir is not None:
                result.artifacts = write_artifacts(result, out_dir)
            raise RuntimeError(f"{len(failed)} trial(s) failed; first: {failed[0].error}")
    if out_dir is not None:
        result.artifacts = write_artifacts(result, out_dir)
    return result


def _run_trials(spec: ExperimentSpec, jobs: int, shared) -> list:
    def one(i):
        try:
            return _run_stream_trial(spec, i, shared)
        except Exception as exc:  # recorded, re-raised after flushing
            return TrialResult(i, error=f"{type(exc).__name__}: {exc}")

    if jobs <= 1:
        results = [one(i) for i in range(spec.trials)]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, range(spec.trials)))
    return sorted(results, key=lambda t: t.index)


def _summarize_streams(spec: ExperimentSpec, result: ExperimentResult) -> None:
    ok = [t for t in result.trials if t.error is None]
    shifted = spec.name != "fpr_null"
    summary = result.summary
    for variant in spec.variants:
        disc = [t.reports[variant].discovery_step for t in ok]
        summary.rows.append(summarize_discoveries(variant, disc, shifted))
    if spec.name == "alert_before_failure":
        idx = failure_index(spec.generator, spec.failure_floor, spec.horizon)
        n0 = spec.generator.schedule.change_point
        # deployment step n sees episode n_train + n - 1
        fail_step = None if idx is None else idx - spec.n_train + 1
        summary.metrics["failure_episode"] = None if idx is None else idx - n0
        summary.metrics["failure_step"] = fail_step
        for variant in spec.variants:
            before = sum(1 for t in ok if _before(t.reports[variant].discovery_step, fail_step))
            summary.metrics[f"{variant}_alerts_before_failure"] = before
            summary.metrics[f"{variant}_fraction_before_failure"] = before / len(ok) if ok else 0.0


def _before(discovery: Optional[int], fail_step: Optional[int]) -> bool:
    if discovery is None:
        return False
    return fail_step is None or discovery < fail_step


def write_artifacts(result: ExperimentResult, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"summary_json": out / "summary.json", "summary_csv": out / "summary.csv"}
    paths["summary_json"].write_text(result.summary.to_json())
    paths["summary_csv"].write_text(result.summary.to_csv())
    if result.trials:
        paths["trials_csv"] = out / "trials.csv"
        paths["trials_csv"].write_text(trials_csv(result.trials, result.spec.variants))
        paths["traces_csv"] = out / "traces.csv"
        paths["traces_csv"].write_text(traces_csv(result.trials, result.spec.variants))
    return {k: str(v) for k, v in paths.items()}


def trials_csv(trials: Sequence[TrialResult], variants: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trial", "variant", "discovery_step", "steps_observed", "final_log_M", "status"])
    for t in trials:
        for v in variants:
            if t.error is not None:
                w.writerow([t.index, v, "", "", "", "error: " + t.error])
                continue
            rep = t.reports[v]
            final = rep.log_values[-1] if rep.log_values else 0.0
            w.writerow([t.index, v, "" if rep.discovery_step is None else rep.discovery_step,
                        rep.horizon, repr(final), "ok"])
    return buf.getvalue()


def traces_csv(trials: Sequence[TrialResult], variants: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trial", "variant", "n", "stat", "log_M"])
    for t in trials:
        if t.error is not None:
            continue
        for v in variants:
            rep = t.reports[v]
            for n, s, lv in zip(rep.steps, rep.stats, rep.log_values):
                w.writerow([t.index, v, n, repr(s) if isinstance(s, float) else s, repr(lv)])
    return buf.getvalue()


def emit_trace_plot_data(reports: Sequence[DetectionReport], path=None) -> str:
    """Wide CSV of per-step martingale values, one column per report.

    Leading ``#`` lines give each column's alert step. Reports shorter than
    the longest are padded with their last value and listed in a ``# padded``
    line.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to emit")
    names, seen = [], {}
    for rep in reports:
        k = seen.get(rep.variant, 0)
        seen[rep.variant] = k + 1
        names.append(rep.variant if k == 0 else f"{rep.variant}_{k + 1}")
    horizon = max(rep.horizon for rep in reports)
    buf = io.StringIO()
    for name, rep in zip(names, reports):
        step = "none" if rep.discovery_step is None else rep.discovery_step
        buf.write(f"# alert_step,{name},{step}\n")
    padded = [f"{name}:{rep.horizon}" for name, rep in zip(names, reports)
              if rep.horizon < horizon]
    if padded:
        buf.write("# padded," + ",".join(padded) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n", *names])
    cols = []
    for rep in reports:
        vals = rep.values
        last = vals[-1] if vals else 1.0
        cols.append(vals + [last] * (horizon - len(vals)))
    for i in range(horizon):
        w.writerow([i + 1, *(repr(c[i]) for c in cols)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


# --- acceptance checks --------------------------------------------------------

def check_summary(summary: SummaryTable) -> tuple[bool, str]:
    """Pass/fail of the reference acceptance condition for an experiment kind."""
    m, name = summary.metrics, summary.experiment
    if name == "fpr_null":
        from scipy.stats import binomtest
        for r in summary.rows:
            p = binomtest(r.alerts, r.trials, 0.01, alternative="two-sided").pvalue
            # only an excess of alerts counts against the bound
            if r.false_positive_rate > 0.01 and p < 0.01:
                return False, f"{r.variant}: FPR {r.false_positive_rate:.4f} (binomial p={p:.3g})"
        rates = ", ".join(f"{r.variant} {r.false_positive_rate:.4f}" for r in summary.rows)
        return True, f"FPR {rates}"
    if name == "detection_ordering":
        med = {r.variant: r.median_discovery for r in summary.rows}
        ok = med["ours"] < med["cm_fv"] < med["cm"] and summary.row("ours").false_negative_rate == 0
        return ok, (f"median ours {med['ours']} / cm_fv {med['cm_fv']} / cm {med['cm']}, "
                    f"ours FNR {summary.row('ours').false_negative_rate}")
    if name == "alert_before_failure":
        before = m["ours_alerts_before_failure"]
        total = summary.row("ours").trials
        ok = before >= math.ceil(0.95 * total)
        return ok, f"{before}/{total} alerts before failure step {m['failure_step']}"
    if name == "martingale_doob":
        n = summary.config["trials"]
        bound = m["bound"] + 3 * math.sqrt(m["bound"] * (1 - m["bound"]) / n)
        return m["crossing_fraction"] <= bound, f"crossing fraction {m['crossing_fraction']:.4f} <= {bound:.4f}"
    if name == "fair_coin":
        lo, hi = m["band"]
        accs = {k: v for k, v in m.items() if k != "band"}
        ok = all(lo <= a <= hi for a in accs.values())
        return ok, ", ".join(f"{k} {v:.4f}" for k, v in accs.items())
    if name == "gradcheck":
        return m["max_relative_error"] < 1e-4, f"max relative error {m['max_relative_error']:.3g}"
    raise ValueError(name)
