import csv
import io
import json
import math
from dataclasses import replace

import pytest

from driftgale import harness
from driftgale.core import DetectorConfig
from driftgale.datagen import GeneratorSpec, ShiftSchedule
from driftgale.detector import DetectionReport, fit, run_deployment
from driftgale.harness import (EXPERIMENTS, ExperimentSpec, SummaryTable, check_summary,
                               default_spec, emit_trace_plot_data, load_experiment_spec,
                               run_experiment, summarize_discoveries)
from driftgale.recency import RecencyConfig

TINY = DetectorConfig(classifier_config=RecencyConfig(hidden=(8,), initial_epochs=2,
                                                      finetune_steps_per_episode=1))


@pytest.fixture
def small_spec():
    gen = GeneratorSpec(dim=4, schedule=ShiftSchedule("abrupt", 40, 2.0))
    return ExperimentSpec("detection_ordering", trials=6, seed=3, variants=("ours", "cm"),
                          generator=gen, detector=TINY, n_train=40, horizon=30)


def report(variant, values, discovery=None):
    return DetectionReport(variant, "y", steps=list(range(1, len(values) + 1)),
                           stats=[1] * len(values), log_values=[math.log(v) for v in values],
                           discovery_step=discovery)


class TestSpec:
    @pytest.mark.parametrize("name", EXPERIMENTS)
    def test_defaults_valid_and_round_trip(self, name):
        spec = default_spec(name)
        assert ExperimentSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec

    def test_default_trial_counts(self):
        assert default_spec("fpr_null").trials == 300
        assert default_spec("detection_ordering").trials == 100
        assert default_spec("gradcheck", trials=5).trials == 5

    @pytest.mark.parametrize("kw", [{"name": "speed"}, {"trials": 0}, {"variants": ("mmd",)},
                                    {"stub": "oracle"}, {"generator": None}, {"n_train": 2}])
    def test_invalid(self, small_spec, kw):
        with pytest.raises(ValueError):
            replace(small_spec, **kw)

    def test_failure_floor_required(self, small_spec):
        with pytest.raises(ValueError):
            replace(small_spec, name="alert_before_failure")

    def test_load_from_file(self, tmp_path, small_spec):
        p = tmp_path / "spec.json"
        p.write_text(json.dumps(small_spec.to_dict()))
        assert load_experiment_spec(p) == small_spec

    def test_unknown_default(self):
        with pytest.raises(ValueError):
            default_spec("nope")


class TestSummary:
    def test_mean_over_true_positives(self):
        row = summarize_discoveries("cm", [10, None, 20, None], shifted=True)
        assert row.mean_discovery == 15.0
        assert row.false_negative_rate == 0.5
        assert row.median_discovery == math.inf
        assert row.status == "ok"

    def test_failure_withholds_mean(self):
        row = summarize_discoveries("cm", [7] + [None] * 19, shifted=True)
        assert row.status == "failure" and row.mean_discovery is None
        assert row.false_negative_rate == pytest.approx(0.95)

    def test_just_below_failure(self):
        row = summarize_discoveries("cm", [7, 9, 11] + [None] * 37, shifted=True)
        assert row.status == "ok" and row.mean_discovery == 9.0

    def test_null_stream_reports_fpr(self):
        row = summarize_discoveries("ours", [None] * 299 + [57], shifted=False)
        assert row.false_positive_rate == pytest.approx(1 / 300)
        assert row.false_negative_rate is None

    def test_json_has_inf_as_string_and_trailing_newline(self):
        t = SummaryTable("fpr_null", rows=[summarize_discoveries("ours", [None], False)])
        text = t.to_json()
        assert text.endswith("\n")
        assert json.loads(text)["rows"][0]["median_discovery"] == "inf"

    def test_csv(self):
        t = SummaryTable("x", rows=[summarize_discoveries("cm", [3, None], True)])
        rows = list(csv.reader(io.StringIO(t.to_csv())))
        assert rows[0][0] == "variant" and rows[1][:3] == ["cm", "2", "1"]


class TestCheckSummary:
    def fpr(self, alerts, trials=300):
        return SummaryTable("fpr_null", rows=[summarize_discoveries(
            "ours", [5] * alerts + [None] * (trials - alerts), False)])

    def test_fpr_zero_passes(self):
        assert check_summary(self.fpr(0))[0]

    def test_fpr_small_excess_not_rejected(self):
        # 6/300 = 0.02 is not significant against 0.01 at level 0.01
        assert check_summary(self.fpr(6))[0]

    def test_fpr_large_excess_rejected(self):
        assert not check_summary(self.fpr(15))[0]

    def test_ordering(self):
        t = SummaryTable("detection_ordering", rows=[
            summarize_discoveries("ours", [10, 12], True),
            summarize_discoveries("cm_fv", [20, 22], True),
            summarize_discoveries("cm", [30, None], True)])
        assert check_summary(t)[0]
        t.rows[0] = summarize_discoveries("ours", [10, None], True)
        assert not check_summary(t)[0]


class TestRun:
    def test_jobs_invariant(self, small_spec):
        a = run_experiment(small_spec, jobs=1).summary.to_json()
        b = run_experiment(small_spec, jobs=3).summary.to_json()
        assert a == b

    def test_artifacts_byte_identical(self, small_spec, tmp_path):
        run_experiment(small_spec, tmp_path / "a")
        run_experiment(small_spec, tmp_path / "b")
        for name in ("summary.json", "summary.csv", "trials.csv", "traces.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_changes_result(self, small_spec):
        a = run_experiment(small_spec).trials
        b = run_experiment(replace(small_spec, seed=4)).trials
        assert [t.reports["cm"].log_values for t in a] != [t.reports["cm"].log_values for t in b]

    def test_summary_embeds_config(self, small_spec):
        s = run_experiment(small_spec).summary
        assert s.config["seed"] == 3 and s.version

    def test_partial_failure_is_flushed(self, small_spec, tmp_path, monkeypatch):
        real = harness._run_stream_trial

        def flaky(spec, index, shared=None):
            if index == 2:
                raise FloatingPointError("boom")
            return real(spec, index, shared)

        monkeypatch.setattr(harness, "_run_stream_trial", flaky)
        with pytest.raises(RuntimeError, match="1 trial"):
            run_experiment(small_spec, tmp_path)
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["metrics"]["failed_trials"] == [2]
        assert summary["rows"][0]["trials"] == 5
        trials = (tmp_path / "trials.csv").read_text()
        assert "error: FloatingPointError: boom" in trials

    def test_alert_before_failure_indexing(self):
        spec = replace(default_spec("alert_before_failure", trials=2),
                       detector=TINY, n_train=30, horizon=100,
                       generator=harness.brightness_generator(0.01, change_point=30))
        m = run_experiment(spec).summary.metrics
        assert m["failure_episode"] == 60
        assert m["failure_step"] == 61

    def test_doob_and_fair_coin_and_gradcheck(self):
        assert check_summary(run_experiment(default_spec("martingale_doob", trials=2000))
                             .summary)[0]
        assert check_summary(run_experiment(default_spec("fair_coin", trials=4000)).summary)[0]
        assert check_summary(run_experiment(default_spec("gradcheck", trials=3)).summary)[0]


class TestTracePlot:
    def test_three_variants(self):
        reps = [report(v, [1.0 + i] * 200) for i, v in enumerate(("ours", "cm_fv", "cm"))]
        reps[0].discovery_step = 57
        text = emit_trace_plot_data(reps)
        comments = [l for l in text.splitlines() if l.startswith("#")]
        body = list(csv.reader(io.StringIO("\n".join(l for l in text.splitlines()
                                                     if not l.startswith("#")))))
        assert body[0] == ["n", "ours", "cm_fv", "cm"]
        assert len(body) == 201 and all(len(r) == 4 for r in body)
        assert "# alert_step,ours,57" in comments and "# alert_step,cm,none" in comments

    def test_single_variant(self):
        text = emit_trace_plot_data([report("ours", [1.0, 2.0])])
        body = [l for l in text.splitlines() if not l.startswith("#")]
        assert body[0] == "n,ours" and len(body) == 3

    def test_empty_is_error(self, tmp_path):
        with pytest.raises(ValueError):
            emit_trace_plot_data([], tmp_path / "t.csv")
        assert not (tmp_path / "t.csv").exists()

    def test_padding_flagged(self, tmp_path):
        p = tmp_path / "t.csv"
        text = emit_trace_plot_data([report("cm", [1.0, 3.0]), report("cm", [1.0] * 4)], p)
        assert p.read_text() == text
        assert "# padded,cm:2" in text
        last = text.strip().splitlines()[-1].split(",")
        assert last[0] == "4" and float(last[1]) == pytest.approx(3.0)

    def test_from_real_reports(self):
        from driftgale.datagen import generate
        eps = generate(GeneratorSpec(dim=3), 60)
        reps = [run_deployment(fit(v, eps[:30], TINY), eps[30:], 30) for v in ("cm", "cm_fv")]
        assert emit_trace_plot_data(reps).count("\n") == 2 + 1 + 30
