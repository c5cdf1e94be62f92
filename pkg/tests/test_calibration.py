import math

import numpy as np
import pytest
from scipy import stats

from clustinf import calibration as cal
from clustinf.clustering import CandidateSet, build_candidates
from clustinf.covmodel import CovarianceParams
from clustinf.errors import CalibrationError, DegenerateIntervalError, InputError
from clustinf.geometry import geo_dissimilarity
from clustinf.inference import ClusterStatVector, cce_test, crs_test, im_test, t_quantile
from clustinf.partition import Partition
from clustinf.regression import cluster_estimates, fit, iv_fit

from conftest import make_panel

B = 40


@pytest.fixture(scope="module")
def panel():
    return make_panel(n_units=40, seed=21)


@pytest.fixture(scope="module")
def cands(panel):
    return build_candidates(geo_dissimilarity(panel.coords), k_max=6, seed=0)


@pytest.fixture(scope="module")
def calib(panel, cands):
    return cal.Calibrator(panel, cands, B, seed=5)


class TestGrids:
    def test_alternatives(self):
        g = cal.alt_grid(400)
        assert g.size == 20 and 0 not in g
        np.testing.assert_allclose(g, -g[::-1])
        assert g[-1] == pytest.approx(0.5) and g[10] == pytest.approx(0.05)

    def test_level_grid_im(self):
        g = cal.a_grid_for(cal.Method.IM, 0.05, 8)
        assert g.size == 50 and g[-1] == 0.05 and g[0] == pytest.approx(0.001)

    @pytest.mark.parametrize("k, expected", [(5, [1 / 32]), (6, [1 / 64, 2 / 64, 3 / 64]), (3, [])])
    def test_level_grid_crs(self, k, expected):
        np.testing.assert_allclose(cal.a_grid_for(cal.Method.CRS, 0.05, k), expected)

    def test_method_parse(self):
        assert cal.Method.parse("crs") is cal.Method.CRS
        with pytest.raises(InputError):
            cal.Method.parse("bootstrap")


class TestSelectAlpha:
    def test_all_below(self):
        grid = [0.01, 0.02, 0.05]
        assert cal.select_alpha([0.0, 0.01, 0.04], 0.05, grid) == 0.05

    def test_crossing(self):
        grid = [0.01, 0.02, 0.03, 0.04, 0.05]
        assert cal.select_alpha([0.03, 0.045, 0.055, 0.07, 0.08], 0.05, grid) == 0.02

    def test_none_qualifies(self):
        assert cal.select_alpha([0.2, 0.3], 0.05, [0.01, 0.05]) == 0.0

    def test_mapping_input(self):
        assert cal.select_alpha({0.05: 0.06, 0.01: 0.02}, 0.05) == 0.01

    def test_empty_grid(self):
        assert cal.select_alpha([], 0.05, []) == 0.0


class TestSimulation:
    def test_white_noise_copy(self):
        data = make_panel(n_units=205, seed=3)
        fr = fit(data)
        white = CovarianceParams(0.0, 1e-9, 1e-9)
        copy = next(cal.simulate_datasets(data, fr, white, 0.0, 1, seed=11))
        noise = copy.y - data.controls() @ fr.coef_controls
        assert stats.kstest(noise, "norm").pvalue > 0.001

    def test_noiseless_iv_copy(self, iv_panel):
        fr = iv_fit(iv_panel)
        tiny = CovarianceParams(math.log(1e-20), 1.0, 1.0, rho=0.5)
        copy = next(cal.simulate_datasets(iv_panel, fr, (tiny, tiny), 0.37, 1, seed=1))
        assert iv_fit(copy).theta_hat == pytest.approx(0.37, abs=1e-7)
        assert iv_fit(copy).pi_hat == pytest.approx(fr.pi_hat, abs=1e-7)

    def test_streams_reproducible_and_distinct(self):
        a = cal.draw_stream(9, 10, 3, 0).standard_normal(5)
        assert np.array_equal(a, cal.draw_stream(9, 10, 3, 0).standard_normal(5))
        assert not np.array_equal(a, cal.draw_stream(9, 10, 4, 0).standard_normal(5))
        assert not np.array_equal(a, cal.draw_stream(9, 10, 3, 1).standard_normal(5))

    def test_copies_do_not_depend_on_batch_size(self, calib, panel):
        ys, _ = cal.simulate_arrays(panel, calib.model, 0.0, 3, seed=5)
        # same draws per copy; only matmul blocking may differ in the last bit
        np.testing.assert_allclose(ys, calib.ys[:3], rtol=0, atol=1e-12)

    def test_needs_coordinates(self):
        data = make_panel(seed=1)
        data.coords = None
        with pytest.raises(InputError):
            cal.fit_null_model(data)


class TestFastPath:
    """Linear-map shortcuts against refitting every simulated copy."""

    @pytest.mark.parametrize("iv", [False, True])
    @pytest.mark.parametrize("method", ["IM", "CRS", "CCE", "UNIT"])
    def test_matches_refits(self, method, iv):
        data = make_panel(n_units=30, seed=8, iv=iv)
        part = (data.unit_partition() if method == "UNIT"
                else build_candidates(geo_dissimilarity(data.coords), k_max=4)[4])
        model = cal.fit_null_model(data)
        ys, xs = cal.simulate_arrays(data, model, 0.0, 4, seed=3)
        thetas = np.array([0.0, 0.2, -0.5])
        fast = cal.score_copies(data, method, part, ys, xs, thetas).stat
        copies = cal.simulate_datasets(data, model.fit, (model.params_u, model.params_v) if iv else model.params_u,
                                       0.0, 4, seed=3)
        for b, copy in enumerate(copies):
            for i, t in enumerate(thetas):
                if method in ("IM", "CRS"):
                    sv = ClusterStatVector.from_estimates(cluster_estimates(copy, part), copy.n, t)
                    slow = abs(im_test(sv, 0.05).statistic) if method == "IM" else crs_test(sv, 0.05).p_value
                else:
                    slow = cce_test(copy, part, t, 0.05).statistic
                assert fast[i, b] == pytest.approx(slow, rel=1e-8, abs=1e-10)


class TestCalibrator:
    @pytest.mark.parametrize("method", list(cal.Method))
    def test_constraints(self, calib, method):
        res = calib.calibrate(method, 0.05)
        assert 0.0 <= res.alpha_hat <= 0.05
        grid = res.grid
        assert set(grid.type1) <= set(calib.ks(method))
        rate = calib.scores(method, res.k_hat).rates([res.alpha_hat])[0, 0] if res.alpha_hat > 0 else 0.0
        assert rate <= 0.05 + 1e-12
        for k, rates in grid.type1.items():
            assert np.all(np.diff(rates) >= 0)
            assert np.all((rates >= 0) & (rates <= 1))

    def test_zero_level_never_rejects(self, calib):
        for method in cal.Method:
            k = calib.ks(method)[0]
            assert not calib.rejections(method, k, 0.0).any()

    def test_crs_five_clusters_cannot_reject(self, calib):
        grid = calib.type1_grid("CRS", 0.05, a_grid=[0.01, 0.03, 0.05])
        assert np.all(grid.type1[5] == 0)
        assert calib.scores("CRS", 5).stat.min() >= 2 / 32 - 1e-12

    def test_deterministic(self, panel, cands):
        a = cal.Calibrator(panel, cands, 20, seed=77).calibrate("IM")
        b = cal.Calibrator(panel, cands, 20, seed=77).calibrate("IM")
        assert a.to_json() == b.to_json()
        assert a.grid.to_csv() == b.grid.to_csv()

    def test_single_candidate(self, panel, cands):
        only = CandidateSet({4: cands[4]}, 4)
        assert cal.Calibrator(panel, only, 10, seed=1).calibrate("IM").k_hat == 4

    def test_power_tie_goes_to_smaller_k(self, panel, cands):
        # with 2 or 3 clusters no CRS level in (0, 0.05] is attainable: zero power at both
        two = CandidateSet({2: cands[2], 3: cands[3]}, 3)
        res = cal.Calibrator(panel, two, 10, seed=1).calibrate("CRS")
        assert res.k_hat == 2 and res.alpha_hat == 0.0

    def test_all_infeasible(self, panel):
        labels = np.zeros(panel.n, dtype=int)
        labels[:2] = 1
        bad = CandidateSet({2: Partition(labels)}, 2)
        with pytest.raises(CalibrationError):
            cal.Calibrator(panel, bad, 5, seed=1).calibrate("IM")

    def test_infeasible_k_excluded(self, panel, cands):
        labels = np.zeros(panel.n, dtype=int)
        labels[:2] = 1
        mixed = CandidateSet({2: Partition(labels), 4: cands[4]}, 4)
        res = cal.Calibrator(panel, mixed, 10, seed=1).calibrate("IM")
        assert res.k_hat == 4 and 2 in res.grid.infeasible

    def test_grid_csv_header(self, calib):
        text = calib.type1_grid("CCE").to_csv()
        assert text.splitlines()[0] == "method,k,a,type1"

    def test_module_wrappers(self, panel, cands):
        grid = cal.type1_grid(panel, cands, "IM", [0.01, 0.05], 10, seed=2)
        assert all(v.size == 2 for v in grid.type1.values())
        res = cal.type2_and_select(panel, cands, "IM", 0.05, 10, seed=2)
        assert res.seed == 2 and res.method is cal.Method.IM


class TestIntervals:
    def test_im_closed_form(self, calib, panel):
        res = calib.calibrate("IM")
        est = cluster_estimates(panel, res.partition)
        k = est.size
        half = t_quantile(0.05, k - 1) * np.std(est, ddof=1) / math.sqrt(k)
        ci = cal.confidence_interval(panel, res, a=0.05)
        assert ci.lo == pytest.approx(est.mean() - half, rel=1e-12)
        assert ci.hi == pytest.approx(est.mean() + half, rel=1e-12)
        assert ci.lo < est.mean() < ci.hi

    def test_zero_level_unbounded(self, calib, panel):
        res = calib.calibrate("IM")
        assert cal.confidence_interval(panel, res, a=0.0).unbounded

    def test_crs_inversion_endpoints(self, calib, panel):
        res = calib.calibrate("CRS")
        part = calib.partition(cal.Method.CRS, 6)
        res = cal.CalibrationResult(cal.Method.CRS, 6, 3 / 64, res.grid, res.seed, 0.05, part)
        ci = cal.confidence_interval(panel, res)
        est = cluster_estimates(panel, part)

        def accepted(t):
            return not crs_test(ClusterStatVector.from_estimates(est, panel.n, t), 3 / 64).reject

        assert accepted(est.mean())
        width = ci.hi - ci.lo
        assert accepted(ci.lo) and accepted(ci.hi)
        assert not accepted(ci.lo - 1e-3 * width) and not accepted(ci.hi + 1e-3 * width)

    def test_everything_accepted_is_unbounded(self):
        assert cal.invert_test(lambda t: True, 0.0, 1.0, 11).unbounded

    def test_nothing_accepted(self):
        with pytest.raises(DegenerateIntervalError):
            cal.invert_test(lambda t: False, 0.0, 1.0, 11)

    def test_bisection_precision(self):
        ci = cal.invert_test(lambda t: abs(t - 0.3) <= 0.123456, 0.3, 1.0, 41, scale=1.0)
        assert ci.lo == pytest.approx(0.3 - 0.123456, abs=1e-4)
        assert ci.hi == pytest.approx(0.3 + 0.123456, abs=1e-4)


@pytest.mark.slow
def test_im_size_under_correct_model():
    from clustinf.simstudy import DesignSpec, _context, _dataset

    spec = DesignSpec(n_units=205, B=1000, seed=4)
    ctx = _context(spec, ["IM"])
    data = _dataset(ctx, 0)
    calib = cal.Calibrator(data, ctx.candidates, 1000, seed=9)
    rate = calib.scores("IM", 8).rates([0.05])[0, 0]
    assert 0.03 <= rate <= 0.08
