import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import ortho_group

from clustinf.covmodel import (
    CovarianceParams,
    ProjectedResiduals,
    assemble_joint_cov,
    cholesky,
    estimate_rho,
    exp_cov,
    project_residuals,
    qmle_fit,
    qmle_objective,
)
from clustinf.errors import InputError, SingularDesignError
from clustinf.geometry import Location, panel_locations, surrogate_centroids

TRUE = CovarianceParams(0.0, 3.0, 1.0)
# ranges this short make every off-diagonal entry underflow to zero
WHITE = CovarianceParams(0.0, 1e-9, 1e-9)


@pytest.fixture(scope="module")
def layout():
    _, period, coords = panel_locations(surrogate_centroids(40, seed=3), 2)
    return coords, period


def simulate(params, coords, period, rng, design=None):
    u = cholesky(exp_cov(params, coords, period)) @ rng.standard_normal(len(coords))
    if design is None:
        design = np.column_stack([np.ones(len(coords)), rng.standard_normal(len(coords))])
    return project_residuals(u, design)


class TestParams:
    def test_json_round_trip(self):
        p = CovarianceParams(0.1, 2.0, 0.5, rho=0.3)
        assert CovarianceParams.from_dict(json.loads(p.to_json())) == p

    @pytest.mark.parametrize("args", [(0, 0, 1), (0, 1, -1), (math.nan, 1, 1), (0, 1, 1, 1.0)])
    def test_invalid(self, args):
        with pytest.raises(InputError):
            CovarianceParams(*args)


class TestExpCov:
    def test_same_place_adjacent_period(self):
        s = exp_cov(TRUE, [Location(1, 1, 1), Location(1, 1, 2)])
        assert s[0, 0] == 1.0
        assert s[0, 1] == pytest.approx(math.exp(-1), abs=1e-15)

    def test_infinite_range_limit(self, rng):
        p = CovarianceParams(0.7, 1e12, 1e12)
        s = exp_cov(p, rng.normal(size=(6, 2)), np.array([1, 2, 1, 2, 1, 3]))
        np.testing.assert_allclose(s, math.exp(0.7), rtol=1e-10)

    def test_elementwise(self, rng):
        coords = rng.normal(size=(4, 2))
        periods = np.array([1, 2, 2, 3])
        p = CovarianceParams(-0.3, 1.7, 0.6)
        s = exp_cov(p, coords, periods)
        for i in range(4):
            for j in range(4):
                dist = math.hypot(*(coords[i] - coords[j]))
                ref = math.exp(-0.3) * math.exp(-dist / 1.7 - abs(periods[i] - periods[j]) / 0.6)
                assert abs(s[i, j] - ref) <= 1e-14

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-2, 2), st.floats(0.05, 20), st.floats(0.05, 20))
    def test_symmetric_and_factorable(self, t1, t2, t3):
        _, period, coords = panel_locations(surrogate_centroids(30, seed=1), 2)
        s = exp_cov(CovarianceParams(t1, t2, t3), coords, period)
        assert np.array_equal(s, s.T)
        cholesky(s)  # raises if not positive definite after the ridge


class TestProjection:
    def test_orthogonal_residuals_keep_norm(self, rng):
        design = rng.standard_normal((30, 3))
        r = rng.standard_normal(30)
        r -= design @ np.linalg.lstsq(design, r, rcond=None)[0]
        proj = project_residuals(r, design)
        assert np.linalg.norm(proj.values) == pytest.approx(np.linalg.norm(r), rel=1e-12)
        np.testing.assert_allclose(proj.residuals, r, atol=1e-12)

    def test_residuals_in_span_vanish(self, rng):
        design = rng.standard_normal((30, 3))
        proj = project_residuals(design @ [1.0, -2.0, 0.5], design)
        assert np.max(np.abs(proj.values)) < 1e-12

    def test_basis_orthonormal_and_orthogonal(self, rng):
        design = rng.standard_normal((40, 4))
        proj = project_residuals(rng.standard_normal(40), design)
        assert proj.ell == 4 and proj.basis.shape == (40, 36)
        np.testing.assert_allclose(proj.basis.T @ proj.basis, np.eye(36), atol=1e-10)
        assert np.max(np.abs(proj.basis.T @ design)) < 1e-8

    def test_rank_deficient(self, rng):
        design = rng.standard_normal((20, 2))
        with pytest.raises(SingularDesignError):
            project_residuals(rng.standard_normal(20), np.column_stack([design, design.sum(axis=1)]))

    def test_projected_likelihood_differs_by_constant(self, rng, layout):
        # restricted-likelihood identity: logdet(B'SB) = logdet S + logdet(D'S^-1 D) - logdet(D'D)
        coords, period = layout
        proj = simulate(TRUE, coords, period, rng)
        d = proj.design
        gaps = []
        for p in [TRUE, CovarianceParams(0.2, 1.0, 2.0), CovarianceParams(-0.4, 6.0, 0.5)]:
            s = exp_cov(p, coords, period)
            si = np.linalg.inv(s)
            pr = si - si @ d @ np.linalg.solve(d.T @ si @ d, d.T @ si)
            r = proj.residuals
            full = 0.5 * (np.linalg.slogdet(s)[1] + np.linalg.slogdet(d.T @ si @ d)[1] + r @ pr @ r)
            gaps.append(qmle_objective(p, proj, coords, period) - full)
        # the factorization ridge (1e-10 relative) shows up around 1e-7
        assert np.ptp(gaps) < 1e-6
        assert gaps[0] == pytest.approx(-0.5 * np.linalg.slogdet(d.T @ d)[1], abs=1e-6)


class TestQmle:
    def test_objective_routes_agree(self, rng, layout):
        coords, period = layout
        proj = simulate(TRUE, coords, period, rng)
        est = qmle_fit(proj, coords, period)
        assert est.info["objective"] == pytest.approx(qmle_objective(est, proj, coords, period), rel=1e-8)
        assert est.info["objective"] <= est.info["init_objective"]

    def test_basis_invariance(self, rng, layout):
        coords, period = layout
        proj = simulate(TRUE, coords, period, rng)
        q = ortho_group.rvs(proj.values.size, random_state=7)
        other = ProjectedResiduals(q.T @ proj.values, proj.basis @ q, proj.ell, proj.design)
        a, b = qmle_fit(proj, coords, period), qmle_fit(other, coords, period)
        assert a.info["objective"] == pytest.approx(b.info["objective"], abs=1e-8)
        np.testing.assert_allclose([a.tau1, a.tau2, a.tau3], [b.tau1, b.tau2, b.tau3], atol=1e-4)

    def test_white_noise_shrinks_ranges(self, rng, layout):
        coords, period = layout
        proj = simulate(WHITE, coords, period, rng)
        init = CovarianceParams(0.0, 3.0, 1.0)
        est = qmle_fit(proj, coords, period, init=init)
        assert est.tau2 < 0.5 * init.tau2 and est.tau3 < init.tau3
        assert est.info["objective"] <= est.info["init_objective"]

    def test_objective_never_above_init(self, rng, layout):
        coords, period = layout
        for init in [CovarianceParams(2.0, 0.1, 5.0), CovarianceParams(-1.0, 20.0, 0.2)]:
            est = qmle_fit(simulate(TRUE, coords, period, rng), coords, period, init=init)
            assert est.info["objective"] <= est.info["init_objective"] + 1e-12

    def test_too_few_dimensions(self, rng):
        coords = rng.normal(size=(15, 2))
        proj = project_residuals(rng.standard_normal(15), np.ones((15, 1)))
        with pytest.raises(InputError):
            qmle_fit(proj, coords)


class TestJoint:
    def test_zero_rho_block_diagonal(self, layout):
        coords, period = layout
        j = assemble_joint_cov(TRUE, CovarianceParams(0.5, 1.0, 1.0), 0.0, coords, period)
        n = len(coords)
        assert np.all(j[:n, n:] == 0)
        np.testing.assert_allclose(j[n:, n:], exp_cov(CovarianceParams(0.5, 1.0, 1.0), coords, period))

    def test_identity_blocks(self, layout):
        coords, period = layout
        j = assemble_joint_cov(WHITE, WHITE, 0.8, coords, period)
        n = len(coords)
        np.testing.assert_allclose(j[:n, n:], 0.8 * np.eye(n), atol=1e-9)
        assert np.linalg.eigvalsh(j).min() == pytest.approx(0.2, abs=1e-8)

    @pytest.mark.parametrize("rho", [0.5, -0.9, 0.9])
    def test_positive_definite(self, layout, rho):
        coords, period = layout
        j = assemble_joint_cov(TRUE, CovarianceParams(-0.2, 1.5, 0.7), rho, coords, period)
        np.linalg.cholesky(j + 1e-10 * np.eye(len(j)))

    def test_rho_bounds(self, layout):
        with pytest.raises(InputError):
            assemble_joint_cov(TRUE, TRUE, 1.0, *layout)


class TestRho:
    def test_identical_residuals_clamped(self, rng, layout):
        coords, period = layout
        u = rng.standard_normal(len(coords))
        assert estimate_rho(u, u, TRUE, TRUE, coords, period) == 0.99

    def test_orthogonal_whitened_residuals(self, rng, layout):
        coords, period = layout
        n = len(coords)
        u = rng.standard_normal(n)
        c = np.column_stack([np.ones(n), u])
        v = rng.standard_normal(n)
        v -= c @ np.linalg.lstsq(c, v, rcond=None)[0]
        assert estimate_rho(u, v, WHITE, WHITE, coords, period) == pytest.approx(0.0, abs=1e-10)

    @pytest.mark.slow
    def test_recovers_error_correlation(self):
        _, period, coords = panel_locations(surrogate_centroids(205), 2)
        chol = cholesky(exp_cov(TRUE, coords, period))
        ones = np.ones((len(coords), 1))
        estimates = []
        for r in range(20):
            rng = np.random.default_rng(100 + r)
            xu, xv = rng.standard_normal((2, len(coords)))
            u, v = chol @ xu, chol @ (0.8 * xu + 0.6 * xv)
            pu = qmle_fit(project_residuals(u, ones), coords, period)
            pv = qmle_fit(project_residuals(v, ones), coords, period)
            estimates.append(estimate_rho(u - u.mean(), v - v.mean(), pu, pv, coords, period))
        assert abs(np.median(estimates) - 0.8) <= 0.15
