"""Exponential space-time covariance model and its Gaussian quasi-likelihood fit.

The working model is ``cov(e_i, e_j) = exp(tau1) * exp(-dist_ij / tau2 - |period_i - period_j| / tau3)``
with ``dist`` the Euclidean distance between (lat, lon) coordinates.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg
from scipy import optimize

from .errors import DegenerateStatisticError, InputError, NumericalError, SingularDesignError
from .geometry import location_arrays, pairwise_distance

log = logging.getLogger(__name__)

JITTERS = (1e-10, 1e-8, 1e-6)
RHO_CLAMP = 0.99
LOG_RANGE_BOUND = math.log(1e3)


@dataclass(frozen=True)
class CovarianceParams:
    tau1: float
    tau2: float
    tau3: float
    rho: float | None = None
    info: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if not (self.tau2 > 0 and self.tau3 > 0):
            raise InputError("tau2 and tau3 must be positive")
        if not math.isfinite(self.tau1):
            raise InputError("tau1 must be finite")
        if self.rho is not None and not abs(self.rho) < 1:
            raise InputError("rho must lie in (-1, 1)")

    @property
    def variance(self) -> float:
        return math.exp(self.tau1)

    def with_rho(self, rho: float) -> "CovarianceParams":
        return CovarianceParams(self.tau1, self.tau2, self.tau3, rho, self.info)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "info"}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "CovarianceParams":
        return cls(float(d["tau1"]), float(d["tau2"]), float(d["tau3"]),
                   None if d.get("rho") is None else float(d["rho"]))


def _locate(locations, periods=None) -> tuple[np.ndarray, np.ndarray]:
    """Accept :class:`Location` lists, (n, 2)/(n, 3) arrays, or coords plus periods."""
    if periods is None:
        return location_arrays(locations)
    return np.asarray(locations, dtype=float).reshape(-1, 2), np.asarray(periods, dtype=int)


def _gaps(locations, periods=None) -> tuple[np.ndarray, np.ndarray]:
    coords, periods = _locate(locations, periods)
    periods = periods.astype(float)
    return pairwise_distance(coords), np.abs(periods[:, None] - periods[None, :])


def correlation(tau2: float, tau3: float, dist: np.ndarray, tgap: np.ndarray) -> np.ndarray:
    return np.exp(-dist / tau2 - tgap / tau3)


def exp_cov(params: CovarianceParams, locations, periods=None) -> np.ndarray:
    dist, tgap = _gaps(locations, periods)
    return params.variance * correlation(params.tau2, params.tau3, dist, tgap)


def cholesky(s: np.ndarray, scale: float | None = None) -> np.ndarray:
    """Lower Cholesky factor, retrying with a growing relative ridge."""
    scale = float(np.mean(np.diag(s))) if scale is None else scale
    eye = np.eye(s.shape[0])
    for jitter in JITTERS:
        try:
            return np.linalg.cholesky(s + jitter * scale * eye)
        except np.linalg.LinAlgError:
            continue
    raise NumericalError(f"covariance matrix not positive definite after ridge {JITTERS[-1]:g}")


@dataclass(frozen=True)
class ProjectedResiduals:
    values: np.ndarray
    basis: np.ndarray
    ell: int
    design: np.ndarray

    @property
    def residuals(self) -> np.ndarray:
        """The residual component orthogonal to the design, in original coordinates."""
        return self.basis @ self.values


def project_residuals(residuals, design) -> ProjectedResiduals:
    """Coordinates of ``residuals`` in an orthonormal basis of the design's orthogonal complement."""
    residuals = np.asarray(residuals, dtype=float).ravel()
    design = np.asarray(design, dtype=float).reshape(residuals.size, -1)
    n, ell = design.shape
    if ell >= n:
        raise SingularDesignError("design has at least as many columns as rows")
    q, r, piv = scipy.linalg.qr(design, pivoting=True)
    diag = np.abs(np.diag(r))
    if np.sum(diag > 1e-10 * diag[0]) < ell:
        raise SingularDesignError("design is rank deficient", column=int(piv[-1]))
    basis = q[:, ell:]
    return ProjectedResiduals(basis.T @ residuals, basis, ell, design)


def _scaled_objective(tau1: float, logdet_r: float, quad_r: float, m: int) -> float:
    return 0.5 * (m * tau1 + logdet_r + math.exp(-tau1) * quad_r)


def qmle_objective(params: CovarianceParams, proj: ProjectedResiduals, locations, periods=None) -> float:
    """Negative Gaussian log-likelihood of the projected residuals (constant dropped).

    Evaluated directly as ``0.5 logdet(B' S B) + 0.5 v' (B' S B)^-1 v``.
    """
    s = proj.basis.T @ exp_cov(params, locations, periods) @ proj.basis
    chol = cholesky(s)
    sol = scipy.linalg.solve_triangular(chol, proj.values, lower=True)
    return float(np.sum(np.log(np.diag(chol))) + 0.5 * sol @ sol)


class _ProfiledLikelihood:
    """Unit-variance likelihood pieces via the restricted-likelihood identity.

    With ``R`` the unit-variance correlation matrix and ``A`` the design,
    ``logdet(B'RB) = logdet R + logdet(A'R^-1 A) - logdet(A'A)`` and
    ``v'(B'RB)^-1 v = u'R^-1 u - u'R^-1 A (A'R^-1 A)^-1 A'R^-1 u`` with ``u = Bv``.
    This avoids forming the projected matrix at every evaluation.
    """

    def __init__(self, proj: ProjectedResiduals, dist: np.ndarray, tgap: np.ndarray):
        self.u = proj.residuals
        self.a = proj.design
        self.m = proj.basis.shape[1]
        self.dist, self.tgap = dist, tgap
        sign, self.logdet_ata = np.linalg.slogdet(self.a.T @ self.a)
        self.evals = 0

    def parts(self, tau2: float, tau3: float) -> tuple[float, float]:
        self.evals += 1
        lr = cholesky(correlation(tau2, tau3, self.dist, self.tgap), scale=1.0)
        ai = scipy.linalg.solve_triangular(lr, self.a, lower=True)
        ui = scipy.linalg.solve_triangular(lr, self.u, lower=True)
        lg = np.linalg.cholesky(ai.T @ ai)
        b = scipy.linalg.solve_triangular(lg, ai.T @ ui, lower=True)
        logdet = 2.0 * (np.sum(np.log(np.diag(lr))) + np.sum(np.log(np.diag(lg)))) - self.logdet_ata
        quad = float(ui @ ui - b @ b)
        return float(logdet), max(quad, 1e-300)

    def profiled(self, x) -> float:
        logdet, quad = self.parts(math.exp(x[0]), math.exp(x[1]))
        tau1 = math.log(quad / self.m)
        return _scaled_objective(tau1, logdet, quad, self.m)

    def full(self, tau1: float, tau2: float, tau3: float) -> float:
        logdet, quad = self.parts(tau2, tau3)
        return _scaled_objective(tau1, logdet, quad, self.m)


def default_init(proj: ProjectedResiduals, locations, periods=None) -> CovarianceParams:
    dist = pairwise_distance(_locate(locations, periods)[0])
    positive = dist[np.triu_indices(dist.shape[0], 1)]
    positive = positive[positive > 0]
    tau2 = float(np.median(positive)) if positive.size else 1.0
    var = float(proj.values @ proj.values) / proj.values.size
    return CovarianceParams(math.log(max(var, 1e-300)), tau2, 1.0)


def qmle_fit(
    proj: ProjectedResiduals,
    locations,
    periods=None,
    init: CovarianceParams | None = None,
    maxiter: int = 500,
    tol: float = 1e-8,
) -> CovarianceParams:
    """Minimize the projected Gaussian negative log-likelihood over tau.

    The log-variance ``tau1`` is profiled out in closed form; the ranges are
    searched on the log scale by bounded Nelder-Mead started from the three
    best points of a 3x3 grid around ``init``. Diagnostics (objective values,
    convergence flag, evaluation count) are stored in ``params.info``.
    """
    m = proj.basis.shape[1]
    if m < 20:
        raise InputError(f"need at least 20 residual dimensions, have {m}")
    init = init or default_init(proj, locations, periods)
    dist, tgap = _gaps(locations, periods)
    lik = _ProfiledLikelihood(proj, dist, tgap)
    x0 = np.array([math.log(init.tau2), math.log(init.tau3)])
    lo = np.minimum(x0, [math.log(init.tau2) - LOG_RANGE_BOUND, -LOG_RANGE_BOUND])
    hi = np.maximum(x0, [math.log(init.tau2) + LOG_RANGE_BOUND, LOG_RANGE_BOUND])
    step = math.log(4.0)
    grid = [x0 + np.array([i, j]) * step for i in (0, -1, 1) for j in (0, -1, 1)]
    grid = [np.clip(g, lo, hi) for g in grid]
    scored = sorted(((lik.profiled(g), idx) for idx, g in enumerate(grid)))
    best_x, best_f, converged = grid[scored[0][1]], scored[0][0], False
    for _, idx in scored[:3]:
        res = optimize.minimize(
            lik.profiled, grid[idx], method="Nelder-Mead", bounds=list(zip(lo, hi)),
            options={"maxiter": maxiter, "fatol": tol, "xatol": 1e-4},
        )
        if res.fun <= best_f:
            best_x, best_f, converged = res.x, float(res.fun), bool(res.success)
    tau2, tau3 = math.exp(best_x[0]), math.exp(best_x[1])
    _, quad = lik.parts(tau2, tau3)
    tau1 = math.log(quad / m)
    init_obj = lik.full(init.tau1, init.tau2, init.tau3)
    final_obj = lik.full(tau1, tau2, tau3)
    if not converged:
        log.warning("QMLE did not converge; returning best point found")
    info = {"objective": final_obj, "init_objective": init_obj, "converged": converged, "evals": lik.evals}
    return CovarianceParams(tau1, tau2, tau3, info=info)


def assemble_joint_cov(params_u, params_v, rho: float, locations, periods=None) -> np.ndarray:
    """Joint covariance of stacked (U, V) with cross block rho * A_U A_V'."""
    if not abs(rho) < 1:
        raise InputError("rho must lie in (-1, 1)")
    su = exp_cov(params_u, locations, periods)
    sv = exp_cov(params_v, locations, periods)
    au, av = cholesky(su), cholesky(sv)
    cross = rho * au @ av.T
    return np.block([[su, cross], [cross.T, sv]])


def estimate_rho(u_hat, v_hat, params_u, params_v, locations, periods=None) -> float:
    """Correlation of the Cholesky-whitened residual vectors, clamped to +-0.99."""
    wu = scipy.linalg.solve_triangular(cholesky(exp_cov(params_u, locations, periods)), u_hat, lower=True)
    wv = scipy.linalg.solve_triangular(cholesky(exp_cov(params_v, locations, periods)), v_hat, lower=True)
    if not (np.std(wu) > 0 and np.std(wv) > 0):
        raise DegenerateStatisticError("whitened residuals have zero variance")
    rho = float(np.corrcoef(wu, wv)[0, 1])
    return float(np.clip(rho, -RHO_CLAMP, RHO_CLAMP))
