import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from driftgale.conformal import (BettingMartingale, ConformalMartingale, FeatureExtractor,
                                 NonconformityBag, betting_update, brute_force_scores,
                                 cm_observe, conformal_p, fit_pca, nonconformity)
from driftgale.core import Rng

# 30-digit mpmath evaluations of the K=100 grid mixture after n steps of p=0.01,
# and after one step of p=0.5.
GRID_P001 = {1: 4.45512897249794336646682925222,
             2: 25.4680408946054986467970474981,
             3: 164.610620551480990890051680851}
GRID_P05_ONE_STEP = 0.643659830581450565475869005654


class TestNonconformity:
    def test_three_four_five(self):
        assert nonconformity(NonconformityBag([[0.0, 0.0]]), [3.0, 4.0]) == 5.0

    def test_nearer_neighbour(self):
        assert nonconformity(NonconformityBag([[0.0, 0.0], [10.0, 0.0]]), [4.0, 0.0]) == 4.0

    def test_duplicate_is_zero(self):
        assert nonconformity(NonconformityBag([[1.0, 2.0]]), [1.0, 2.0]) == 0.0

    def test_empty_bag(self):
        with pytest.raises(ValueError):
            nonconformity(NonconformityBag(dim=2), [0.0, 0.0])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            nonconformity(NonconformityBag([[0.0, 0.0]]), [0.0, 0.0, 0.0])


class TestPValue:
    def test_single_self_tie(self):
        assert conformal_p([3.0], 0.5) == 0.5

    def test_largest_score(self):
        assert conformal_p(list(range(9)) + [100.0], 0.5) == pytest.approx(0.05)

    def test_smallest_score(self):
        assert conformal_p(list(range(1, 10)) + [0.0], 0.5) == pytest.approx(0.95)

    def test_empty(self):
        with pytest.raises(ValueError):
            conformal_p([], 0.5)

    @given(st.lists(st.floats(0, 10), min_size=1, max_size=30), st.floats(1e-9, 1.0))
    def test_in_unit_interval(self, scores, theta):
        assert 0 < conformal_p(scores, theta) <= 1


class TestBetting:
    def test_starts_at_one(self):
        assert BettingMartingale.create().value == 1.0

    def test_p_one_never_grows(self):
        bm = BettingMartingale.create()
        for _ in range(200):
            prev = bm.log_value
            bm = betting_update(bm, 1.0)
            assert bm.log_value <= prev
        assert bm.value < 100

    def test_grid_mixture_at_p_001(self):
        bm = BettingMartingale.create(100)
        for n in (1, 2, 3):
            bm = betting_update(bm, 0.01)
            assert bm.value == pytest.approx(GRID_P001[n], rel=1e-12)
        assert bm.value > 100

    def test_one_step_at_half(self):
        assert betting_update(BettingMartingale.create(), 0.5).value == pytest.approx(
            GRID_P05_ONE_STEP, rel=1e-12)

    def test_per_epsilon_logs(self):
        bm = BettingMartingale.create(4)
        for p in (0.3, 0.9, 0.05):
            bm = betting_update(bm, p)
        eps = np.array([0.25, 0.5, 0.75, 1.0])
        expect = sum(np.log(eps) + (eps - 1) * math.log(p) for p in (0.3, 0.9, 0.05))
        np.testing.assert_allclose(bm.per_epsilon_log_values, expect, rtol=1e-13)

    @pytest.mark.parametrize("p", [0.0, -0.1, 1.5, math.nan])
    def test_invalid_p(self, p):
        with pytest.raises(ValueError):
            betting_update(BettingMartingale.create(), p)

    def test_uniform_null_crossing(self):
        trials, n = 1000, 500
        g = np.random.default_rng(0)
        eps = np.arange(1, 101) / 100
        crossed = 0
        for _ in range(trials):
            p = 1.0 - g.random(n)
            logs = np.cumsum(np.log(eps)[None, :] + np.outer(np.log(p), eps - 1), axis=0)
            mix = np.log(np.mean(np.exp(logs - logs.max(axis=1, keepdims=True)), axis=1)) \
                + logs.max(axis=1)
            crossed += np.any(mix >= math.log(100))
        assert crossed / trials <= 0.01 + 3 * math.sqrt(0.01 * 0.99 / trials)

    def test_uniform_null_via_update(self):
        g = np.random.default_rng(1)
        crossed = 0
        for _ in range(200):
            bm = BettingMartingale.create()
            for p in 1.0 - g.random(200):
                bm = betting_update(bm, float(p))
                if bm.log_value >= math.log(100):
                    crossed += 1
                    break
        assert crossed / 200 <= 0.01 + 3 * math.sqrt(0.01 * 0.99 / 200)


class TestPca:
    def test_line_data(self):
        t = np.linspace(-3, 3, 40)
        x = np.outer(t, [1.0, 2.0, 2.0]) + np.array([5.0, -1.0, 0.5])
        fx = fit_pca(x, 1)
        z = fx.transform(x)
        np.testing.assert_allclose(np.abs(z[:, 0] - z[0, 0]), 3 * np.abs(t - t[0]), atol=1e-10)
        recon = z @ fx.components + fx.mean
        np.testing.assert_allclose(recon, x, atol=1e-10)

    def test_full_basis_preserves_distances(self):
        x = np.random.default_rng(0).standard_normal((30, 5))
        z = fit_pca(x, 5).transform(x)
        from scipy.spatial.distance import pdist
        np.testing.assert_allclose(pdist(z), pdist(x), rtol=1e-10)

    def test_isotropic_variance_ratio(self):
        x = np.random.default_rng(1).standard_normal((10_000, 8))
        fx = fit_pca(x, 2)
        assert fx.explained_variance_ratio.sum() == pytest.approx(2 / 8, abs=0.05)
        # independent oracle from the sample covariance spectrum
        ev = np.sort(np.linalg.eigvalsh(np.cov(x, rowvar=False)))[::-1]
        assert fx.explained_variance_ratio.sum() == pytest.approx(ev[:2].sum() / ev.sum(),
                                                                  rel=1e-10)

    def test_orthonormal_and_signed(self):
        fx = fit_pca(np.random.default_rng(2).standard_normal((50, 6)), 4)
        np.testing.assert_allclose(fx.components @ fx.components.T, np.eye(4), atol=1e-12)
        for row in fx.components:
            assert row[np.argmax(np.abs(row))] > 0

    def test_deterministic(self):
        x = np.random.default_rng(3).standard_normal((20, 4))
        np.testing.assert_array_equal(fit_pca(x, 2).components, fit_pca(x, 2).components)

    def test_rank_clamp_warns(self):
        x = np.outer(np.arange(10.0), [1.0, 1.0, 0.0])
        with pytest.warns(RuntimeWarning):
            fx = fit_pca(x, 3)
        assert fx.k == 1 and fx.warnings

    @pytest.mark.parametrize("x,k", [(np.zeros((1, 3)), 1), (np.zeros((5, 3)), 0)])
    def test_invalid(self, x, k):
        with pytest.raises(ValueError):
            fit_pca(x, k)


class TestBag:
    def test_incremental_equals_brute_force(self):
        g = np.random.default_rng(0)
        pts = g.standard_normal((500, 3))
        pts[100] = pts[50]  # a duplicate exercises zero distances
        bag = NonconformityBag(pts[:5])
        for i in range(5, 500):
            bag.insert(pts[i])
            np.testing.assert_allclose(bag.scores, brute_force_scores(pts[: i + 1]),
                                       rtol=0, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 60), st.integers(0, 10_000))
    def test_incremental_property(self, n, seed):
        pts = np.random.default_rng(seed).integers(-3, 3, (n, 2)).astype(float)
        bag = NonconformityBag(dim=2)
        for p in pts:
            bag.insert(p)
        np.testing.assert_array_equal(bag.scores, brute_force_scores(pts))

    def test_single_point_score_infinite(self):
        assert math.isinf(NonconformityBag([[1.0]]).scores[0])


class TestConformalMartingale:
    def test_exchangeable_p_values_uniform(self):
        g = np.random.default_rng(0)
        train = g.standard_normal((200, 4))
        cm = ConformalMartingale(train, rng=Rng(1))
        ps = [cm.step(x)[1] for x in g.standard_normal((10_000, 4))]
        assert stats.kstest(ps, "uniform").pvalue > 0.01

    def test_identity_extractor_matches_raw(self):
        g = np.random.default_rng(2)
        train, test = g.standard_normal((50, 3)), g.standard_normal((100, 3)) + 0.5
        a = ConformalMartingale(train, None, rng=Rng(3))
        b = ConformalMartingale(train, FeatureExtractor("identity"), rng=Rng(3))
        for x in test:
            assert a.step(x) == b.step(x)

    def test_strong_mean_shift_alerts(self):
        hits = 0
        for seed in range(20):
            g = np.random.default_rng(seed)
            cm = ConformalMartingale(g.standard_normal((200, 4)), rng=Rng(seed))
            for x in g.standard_normal((100, 4)) + 4.0:
                _, alert = cm_observe(cm, x)
            hits += alert.alerted and alert.discovery_step < 100
        assert hits >= 0.9 * 20

    def test_duplicate_point(self):
        train = np.random.default_rng(4).standard_normal((20, 2))
        cm = ConformalMartingale(train, rng=Rng(0))
        d = cm.bag.distances(train[3])
        assert d.min() == 0.0
        log_m, p, _ = cm.step(train[3])
        # the smallest possible score: p is at least (n - ties + 1) / (n + 1)
        assert p >= 18 / 21
        assert log_m <= 0.0

    def test_pca_extractor_is_fit_on_training_only(self):
        g = np.random.default_rng(5)
        train = g.standard_normal((100, 6))
        fx = fit_pca(train, 3)
        cm = ConformalMartingale(train, fx, rng=Rng(0))
        cm.step(g.standard_normal(6) + 10)
        np.testing.assert_array_equal(cm.extractor.components, fx.components)
        assert cm.bag.dim == 3
