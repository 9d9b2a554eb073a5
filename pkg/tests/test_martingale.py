import math

import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import binom
from hypothesis import given, settings, strategies as st

from driftgale.core import Rng
from driftgale.martingale import (AlertState, ExponentialMartingale, MartingaleParams,
                                  check_alert, crossing_step, display_value, first_crossing,
                                  log_paths, one_step_ratios, simulate_null, trace_rows, update)

# 40-digit mpmath evaluations of 2e/(1+e), 2/(1+e) and the fair-coin crossing
# probability within 500 steps at C=100 (exact dynamic programme over S_n).
UP = 1.46211715726000975850231848364367254873
DOWN = 0.53788284273999024149768151635632745127
EXACT_CROSS_500 = 0.008382938121049165940140034421815288357922


def run(ys, params=MartingaleParams(), C=100.0):
    m, a = ExponentialMartingale(params), AlertState(C)
    for y in ys:
        m = update(m, y)
        a = check_alert(m, a)
    return m, a


class TestUpdate:
    def test_one_correct(self):
        m, _ = run([1])
        assert m.value == pytest.approx(UP, rel=1e-14)

    def test_one_wrong(self):
        m, _ = run([0])
        assert m.value == pytest.approx(DOWN, rel=1e-14)

    def test_correct_then_wrong_shrinks(self):
        m, _ = run([1, 0])
        assert m.value == pytest.approx(UP * DOWN, rel=1e-14)
        assert m.value == pytest.approx(0.786448, abs=1e-6)
        assert m.value < 1

    @pytest.mark.parametrize("bad", [2, -1, 0.5, None])
    def test_rejects_non_binary(self, bad):
        with pytest.raises(ValueError):
            update(ExponentialMartingale(), bad)

    def test_fresh_state(self):
        m = ExponentialMartingale()
        assert (m.n, m.S_n, m.log_M, m.value) == (0, 0, 0.0, 1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 1), max_size=400),
           st.floats(0.1, 3.0), st.floats(0.05, 0.95))
    def test_log_matches_closed_form(self, ys, t, p):
        m, _ = run(ys, MartingaleParams(t, p))
        assert m.n == len(ys) and m.S_n == sum(ys)
        assert abs(m.log_M - m.closed_form()) < 1e-12 * max(1.0, len(ys))

    def test_long_sequence_exactness(self):
        ys = np.random.default_rng(4).integers(0, 2, 10_000)
        m, _ = run(ys.tolist())
        assert abs(m.log_M - m.closed_form()) < 1e-12 * 10_000
        # the linear value underflows here; positivity lives in log space
        assert math.isfinite(m.log_M)

    @pytest.mark.parametrize("p_correct", [0.1, 0.5, 0.9])
    def test_long_sequence_against_high_precision(self, p_correct):
        mpmath = pytest.importorskip("mpmath")
        ys = (np.random.default_rng(6).random(10_000) < p_correct).astype(int).tolist()
        m, _ = run(ys)
        with mpmath.workdps(40):
            exact = sum(ys) - len(ys) * mpmath.log((1 + mpmath.e) / 2)
            assert abs(m.log_M - float(exact)) <= 4 * math.ulp(abs(float(exact)))


class TestAlert:
    def test_streak_crosses_at_thirteen(self):
        _, a = run([1] * 20)
        assert a.discovery_step == 13

    def test_twelve_is_not_enough(self):
        _, a = run([1] * 12)
        assert not a.alerted

    def test_crossing_step_helper(self):
        assert crossing_step(math.log(UP), 100) == 13

    def test_alternating_never_alerts(self):
        _, a = run([1, 0] * 5000)
        assert not a.alerted

    def test_threshold_one_alerts_immediately(self):
        m = update(ExponentialMartingale(), 1)
        a = check_alert(m, AlertState(threshold_C=1.0))
        assert a.discovery_step == 1

    def test_discovery_step_frozen(self):
        ys = [1] * 13 + [0] * 40 + [1] * 40
        m, a = ExponentialMartingale(), AlertState()
        seen = []
        for y in ys:
            m = update(m, y)
            a = check_alert(m, a)
            seen.append(a.discovery_step)
        assert set(seen[12:]) == {13}

    def test_display_cap(self):
        assert display_value(701.0) == math.inf
        assert display_value(0.0) == 1.0


class TestVectorised:
    def test_log_paths_agree_with_update(self):
        ys = np.random.default_rng(1).integers(0, 2, (5, 60))
        paths = log_paths(ys)
        for row, path in zip(ys, paths):
            m = ExponentialMartingale()
            for k, y in enumerate(row):
                m = update(m, int(y))
                assert path[k] == pytest.approx(m.log_M, abs=1e-12)

    def test_first_crossing_one_based(self):
        paths = log_paths(np.array([[1] * 20, [1, 0] * 10]))
        np.testing.assert_array_equal(first_crossing(paths, 100), [13, 0])


class TestSimulateNull:
    def test_one_step_mean_is_one(self):
        _, mean = simulate_null(MartingaleParams(), 1, 10**6, 100, Rng(0))
        se = (UP - DOWN) / 2 / math.sqrt(10**6)
        assert abs(mean - 1.0) < 4 * se

    def test_doob_bound_horizon_200(self):
        frac, _ = simulate_null(MartingaleParams(), 200, 10**5, 100, Rng(1))
        assert frac <= 0.01

    def test_short_horizon_mean(self):
        # Var M_10 = 1.2134**10 - 1 ~ 6, so 10**5 trials pin the mean to ~0.01
        _, mean = simulate_null(MartingaleParams(), 10, 10**5, 100, Rng(5))
        assert abs(mean - 1.0) < 0.05

    def test_expected_final_value_exact(self):
        # E[M_200] over the Binomial(200, 1/2) law of S_200, using the closed form
        n = 200
        s = np.arange(n + 1)
        logs = np.array([ExponentialMartingale(MartingaleParams(), n, int(k), 0.0).closed_form()
                         for k in s])
        log_pmf = binom.logpmf(s, n, 0.5)
        assert np.exp(logsumexp(logs + log_pmf)) == pytest.approx(1.0, abs=1e-10)

    def test_matches_exact_crossing_probability(self):
        trials = 40_000
        frac, _ = simulate_null(MartingaleParams(), 500, trials, 100, Rng(2))
        se = math.sqrt(EXACT_CROSS_500 * (1 - EXACT_CROSS_500) / trials)
        assert abs(frac - EXACT_CROSS_500) < 4 * se

    def test_shifted_streams_cross(self):
        frac, _ = simulate_null(MartingaleParams(), 200, 1000, 100, Rng(3), true_p=0.9)
        assert frac > 0.99

    @pytest.mark.parametrize("bad", [(0, 5), (5, 0)])
    def test_rejects_empty(self, bad):
        with pytest.raises(ValueError):
            simulate_null(MartingaleParams(), bad[0], bad[1], 100, Rng(0))

    def test_deterministic(self):
        a = simulate_null(MartingaleParams(), 50, 2000, 100, Rng(9))
        b = simulate_null(MartingaleParams(), 50, 2000, 100, Rng(9))
        assert a == b


class TestOneStepRatio:
    @pytest.mark.parametrize("p", [0.3, 0.5, 0.8])
    @pytest.mark.parametrize("prefix", [[], [1, 1, 0], [0] * 7])
    def test_conditional_mean_one(self, p, prefix):
        params = MartingaleParams(1.0, p)
        r = one_step_ratios(params, prefix, 10**5, Rng(11))
        se = r.std(ddof=1) / math.sqrt(r.size)
        assert abs(r.mean() - 1.0) < 3 * se


class TestParams:
    def test_defaults(self):
        prm = MartingaleParams()
        assert (prm.t, prm.p, prm.q) == (1.0, 0.5, 0.5)

    @pytest.mark.parametrize("t,p", [(0, 0.5), (-1, 0.5), (1, 0), (1, 1), (1, 1.2)])
    def test_invalid(self, t, p):
        with pytest.raises(ValueError):
            MartingaleParams(t, p)


def test_trace_rows_schema():
    rows = trace_rows([1, 0], [math.log(UP), math.log(UP * DOWN)], None)
    assert rows[0][0] == 1 and rows[1][0] == 2
    assert rows[0][3] == pytest.approx(UP)
    assert all(r[4] == 0 for r in rows)
