"""Simulation calibration of the inner test level and the number of clusters.

A Gaussian model for the regression errors is fitted once, ``B`` copies of
the data are simulated under ``theta = 0`` with regressors held fixed, and
every candidate partition is scored on the same copies. Power at an
alternative ``theta_alt`` is the rate at which ``H0: theta = theta_alt`` is
rejected on the null copies; every estimator used here is shift equivariant
in ``theta``, so this equals the power against a true value of ``-theta_alt``
and the alternative grid is symmetric.

All estimators are linear in the simulated outcome (and, for IV, the
simulated regressor), so within-cluster and full-sample estimates for all
copies are obtained from a handful of matrix products.
"""
from __future__ import annotations

import csv
import enum
import io
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import covmodel
from .clustering import CandidateSet
from .covmodel import CovarianceParams
from .errors import (
    CalibrationError,
    DegenerateIntervalError,
    InputError,
    NumericalError,
)
from .inference import (
    MAX_ENUMERATED_CLUSTERS,
    cce_critical_value,
    orbit_abs_t,
    sampled_signs,
    sign_matrix,
    t_quantile,
    TIE_RTOL,
    cce_variance,
)
from .partition import Partition
from .regression import FitResult, PanelDataset, cluster_estimates, fit as full_fit, partial_out

log = logging.getLogger(__name__)

N_ALT = 10
A_GRID_POINTS = 50
ORBIT_CHUNK = 2_000_000  # max elements of an orbit block held in memory
P_TOL = 1e-12
_DRAW_TAG = 0x5EED


class Method(str, enum.Enum):
    IM = "IM"
    CRS = "CRS"
    CCE = "CCE"
    UNIT = "UNIT"

    @classmethod
    def parse(cls, value) -> "Method":
        try:
            return value if isinstance(value, cls) else cls(str(value).upper())
        except ValueError:
            raise InputError(f"unknown method {value!r}; choose from im, crs, cce, unit") from None


def alt_grid(n: int) -> np.ndarray:
    """The 20 alternatives +-j/sqrt(n), j = 1..10, in increasing order."""
    j = np.arange(1, N_ALT + 1) / math.sqrt(n)
    return np.concatenate([-j[::-1], j])


def a_grid_for(method: Method, alpha: float, k: int) -> np.ndarray:
    """Inner levels searched: 50 evenly spaced points in (0, alpha], or the
    attainable CRS p-values j / 2**k up to alpha."""
    if method is Method.CRS:
        m = 2 ** min(k, MAX_ENUMERATED_CLUSTERS)
        j = np.arange(1, math.floor(alpha * m + 1e-9) + 1)
        return j / m
    return np.round(alpha * np.arange(1, A_GRID_POINTS + 1) / A_GRID_POINTS, 12)


def select_alpha(type1, alpha: float, a_grid=None) -> float:
    """Largest grid level whose simulated Type-I rate is at most ``alpha``; 0 if none.

    ``type1`` is either an array aligned with ``a_grid`` or a mapping a -> rate.
    """
    if a_grid is None:
        items = sorted(dict(type1).items())
        a_grid, type1 = [a for a, _ in items], [r for _, r in items]
    a_grid = np.asarray(a_grid, dtype=float)
    rates = np.asarray(type1, dtype=float)
    ok = (rates <= alpha + P_TOL) & (a_grid <= alpha + P_TOL)
    return float(a_grid[ok].max()) if ok.any() else 0.0


# --- fitted null model and simulation -----------------------------------------

@dataclass
class NullModel:
    """Full-sample fit plus fitted error covariance(s) used to simulate copies."""

    fit: FitResult
    params_u: CovarianceParams
    params_v: CovarianceParams | None = None
    chol_u: np.ndarray | None = field(default=None, repr=False)
    chol_v: np.ndarray | None = field(default=None, repr=False)

    @property
    def rho(self) -> float | None:
        return None if self.params_v is None else self.params_v.rho


def _require_locations(data: PanelDataset) -> None:
    if data.coords is None:
        raise InputError("dataset has no coordinates; supply lat/lon or a locations file")


def fit_null_model(data: PanelDataset, fit_result: FitResult | None = None) -> NullModel:
    """Full-sample fit and QMLE of the exponential error covariance.

    OLS residuals are projected off ``[x, controls]``; for IV both the
    structural and first-stage residuals are projected off the controls and
    ``rho`` is the correlation of the whitened residuals.
    """
    _require_locations(data)
    fr = fit_result or full_fit(data)
    c = data.controls()
    if data.is_iv:
        pu = covmodel.qmle_fit(covmodel.project_residuals(fr.residuals_u, c), data.coords, data.period)
        pv = covmodel.qmle_fit(covmodel.project_residuals(fr.residuals_v, c), data.coords, data.period)
        rho = covmodel.estimate_rho(fr.residuals_u, fr.residuals_v, pu, pv, data.coords, data.period)
        return _with_factors(NullModel(fr, pu.with_rho(rho), pv.with_rho(rho)), data)
    proj = covmodel.project_residuals(fr.residuals_u, np.column_stack([data.x, c]))
    pu = covmodel.qmle_fit(proj, data.coords, data.period)
    return _with_factors(NullModel(fr, pu), data)


def _with_factors(model: NullModel, data: PanelDataset) -> NullModel:
    model.chol_u = covmodel.cholesky(covmodel.exp_cov(model.params_u, data.coords, data.period))
    if model.params_v is not None:
        model.chol_v = covmodel.cholesky(covmodel.exp_cov(model.params_v, data.coords, data.period))
    return model


def draw_stream(seed: int, theta_index: int, b: int, equation: int) -> np.random.Generator:
    """Independent generator for one replication and equation."""
    ss = np.random.SeedSequence(seed, spawn_key=(_DRAW_TAG, theta_index, b, equation))
    return np.random.Generator(np.random.PCG64(ss))


def _normals(seed: int, theta_index: int, B: int, n: int, equation: int) -> np.ndarray:
    return np.stack([draw_stream(seed, theta_index, b, equation).standard_normal(n) for b in range(B)])


def simulate_arrays(data: PanelDataset, model: NullModel, theta: float, B: int, seed: int,
                    theta_index: int = N_ALT) -> tuple[np.ndarray, np.ndarray | None]:
    """``(Y, X)`` copies as ``B x n`` arrays; ``X`` is None for OLS (regressor held fixed)."""
    if B < 1:
        raise InputError("B must be >= 1")
    n = data.n
    fr = model.fit
    mean_y = data.controls() @ fr.coef_controls
    xi_u = _normals(seed, theta_index, B, n, 0)
    u = xi_u @ model.chol_u.T
    if not data.is_iv:
        return mean_y + theta * data.x + u, None
    xi_v = _normals(seed, theta_index, B, n, 1)
    rho = model.rho
    v = (rho * xi_u + math.sqrt(1.0 - rho * rho) * xi_v) @ model.chol_v.T
    x = data.controls() @ fr.first_stage_controls + fr.pi_hat * data.z + v
    return mean_y + theta * x + u, x


def simulate_datasets(data: PanelDataset, fit_result: FitResult, params, theta: float, B: int, seed: int):
    """Yield ``B`` synthetic datasets drawn from the fitted Gaussian model.

    ``params`` is a :class:`CovarianceParams` for OLS or a pair
    ``(params_u, params_v)`` for IV, with the cross-equation correlation in
    ``params_v.rho``.
    """
    if data.is_iv:
        pu, pv = params
        model = _with_factors(NullModel(fit_result, pu, pv if pv.rho is not None else pv.with_rho(pu.rho)), data)
    else:
        model = _with_factors(NullModel(fit_result, params), data)
    ys, xs = simulate_arrays(data, model, theta, B, seed)
    for b in range(B):
        yield PanelDataset(
            y=ys[b], x=data.x if xs is None else xs[b], w=data.w, z=data.z,
            unit_id=data.unit_id, period=data.period, coords=data.coords,
            control_names=list(data.control_names),
        )


# --- linear maps ------------------------------------------------------------

def within_cluster_map(data: PanelDataset, partition: Partition) -> tuple[np.ndarray, np.ndarray]:
    """Rows ``g_C`` with ``theta_hat_C = g_C . y / g_C . x`` and the observed denominators.

    Uses the regular fitting code on every cluster, so too-small clusters,
    singular designs and degenerate instruments raise exactly as they would there.
    """
    g = np.zeros((partition.k, data.n))
    denom = np.empty(partition.k)
    for c, members in enumerate(partition.clusters()):
        fr = full_fit(data, members)
        g[c, members] = fr.partialled_instrument
        denom[c] = fr.hessian
    return g, denom


def cluster_score_map(data: PanelDataset, partition: Partition, fr: FitResult) -> np.ndarray:
    """Rows ``h_C = M(1_C * g)`` so that cluster score sums are ``H (y - x theta_hat)``."""
    ind = partition.indicator() * fr.partialled_instrument[None, :]
    return partial_out(data.controls(), ind.T).T


@dataclass
class _Scores:
    """Per-copy test statistics at the null and every alternative (rows: null, then alternatives)."""

    method: Method
    k: int
    stat: np.ndarray  # |t|, CCE statistic, or CRS p-value; shape (1 + 2*N_ALT, B)

    def rejects(self, a) -> np.ndarray:
        a = np.atleast_1d(np.asarray(a, dtype=float))
        out = np.zeros((a.size,) + self.stat.shape, dtype=bool)
        for i, level in enumerate(a):
            if level <= 0:
                continue
            if self.method is Method.CRS:
                out[i] = self.stat <= level + P_TOL
            elif self.method is Method.IM:
                out[i] = self.stat > t_quantile(level, self.k - 1)
            else:
                out[i] = self.stat > cce_critical_value(level, self.k)
        return out

    def rates(self, a) -> np.ndarray:
        """Rejection rates, shape (len(a), 1 + 2*N_ALT)."""
        return self.rejects(a).mean(axis=-1)


def _im_abs_t(s: np.ndarray) -> np.ndarray:
    k = s.shape[-1]
    sd = np.std(s, axis=-1, ddof=1)
    mean = s.mean(axis=-1)
    ok = sd > 1e-13 * np.sqrt(np.mean(s * s, axis=-1))
    return np.where(ok, np.abs(mean) * math.sqrt(k) / np.where(ok, sd, 1.0), 0.0)


def _crs_pvalues(s: np.ndarray, signs: np.ndarray) -> np.ndarray:
    rows = s.reshape(-1, s.shape[-1])
    out = np.empty(rows.shape[0])
    step = max(1, ORBIT_CHUNK // signs.shape[0])
    for lo in range(0, rows.shape[0], step):
        w = orbit_abs_t(rows[lo:lo + step], signs)
        w0 = w[:, :1]
        tol = TIE_RTOL * np.maximum(w.max(axis=1, keepdims=True), np.finfo(float).tiny)
        out[lo:lo + step] = np.mean(w >= w0 - tol, axis=1)
    return out.reshape(s.shape[:-1])


def score_copies(data: PanelDataset, method, partition: Partition, ys: np.ndarray, xs: np.ndarray | None,
                 thetas, fit_result: FitResult | None = None, signs: np.ndarray | None = None) -> _Scores:
    """Test statistics of ``H0: theta = t`` for every ``t`` in ``thetas`` and every copy.

    ``ys`` (and ``xs`` for IV) hold one dataset per row; the observed data is
    the single-row case. Raises NumericalError when a within-cluster fit is
    infeasible for this partition.
    """
    method = Method.parse(method)
    thetas = np.asarray(thetas, dtype=float)
    ys = np.atleast_2d(ys)
    n = data.n
    if method in (Method.IM, Method.CRS):
        g, denom = within_cluster_map(data, partition)
        est = (ys @ g.T) / (denom[None, :] if xs is None else np.atleast_2d(xs) @ g.T)
        s = math.sqrt(n / partition.k) * (est[None, :, :] - thetas[:, None, None])
        if method is Method.IM:
            return _Scores(method, partition.k, _im_abs_t(s))
        signs = sign_matrix(partition.k) if signs is None else signs
        return _Scores(method, partition.k, _crs_pvalues(s, signs))
    fr = fit_result or full_fit(data)
    gvec = fr.partialled_instrument
    h = cluster_score_map(data, partition, fr)
    xs = data.x[None, :] if xs is None else np.atleast_2d(xs)
    hess = xs @ gvec
    theta_full = (ys @ gvec) / hess
    sums = ys @ h.T - (xs @ h.T) * theta_full[:, None]
    var = np.sum(sums * sums, axis=1) / hess ** 2
    resid = partial_out(data.controls(), (ys - theta_full[:, None] * xs).T).T
    ok = var > 1e-20 * np.sum((resid * gvec[None, :]) ** 2, axis=1) / hess ** 2
    se = np.sqrt(np.where(ok, var, 1.0))
    stat = np.where(ok[None, :], np.abs(theta_full[None, :] - thetas[:, None]) / se[None, :], 0.0)
    return _Scores(method, partition.k, stat)


# --- results ----------------------------------------------------------------

@dataclass
class ErrorGrid:
    """Simulated Type-I rates per (k, a) and average Type-II rates per k."""

    method: Method
    B: int
    alt_grid: np.ndarray
    a_grid: dict[int, np.ndarray] = field(default_factory=dict)
    type1: dict[int, np.ndarray] = field(default_factory=dict)
    alpha_by_k: dict[int, float] = field(default_factory=dict)
    type2_avg: dict[int, float] = field(default_factory=dict)
    power_by_alt: dict[int, np.ndarray] = field(default_factory=dict)
    infeasible: dict[int, str] = field(default_factory=dict)

    def rows(self):
        for k in sorted(self.type1):
            for a, r in zip(self.a_grid[k], self.type1[k]):
                yield self.method.value, k, float(a), float(r)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "k", "a", "type1"])
        for method, k, a, r in self.rows():
            w.writerow([method, k, f"{a:.6g}", f"{r:.6g}"])
        return buf.getvalue()


@dataclass
class CalibrationResult:
    method: Method
    k_hat: int
    alpha_hat: float
    grid: ErrorGrid
    seed: int
    alpha: float = 0.05
    partition: Partition | None = field(default=None, repr=False, compare=False)

    @property
    def power(self) -> float:
        return 1.0 - self.grid.type2_avg[self.k_hat]

    def to_dict(self) -> dict:
        g = self.grid
        return {
            "method": self.method.value, "k_hat": self.k_hat, "alpha_hat": self.alpha_hat,
            "alpha": self.alpha, "seed": self.seed, "B": g.B,
            "alt_grid": [float(t) for t in g.alt_grid],
            "alpha_by_k": {str(k): v for k, v in sorted(g.alpha_by_k.items())},
            "type2_avg": {str(k): v for k, v in sorted(g.type2_avg.items())},
            "infeasible": {str(k): v for k, v in sorted(g.infeasible.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# --- calibrator ---------------------------------------------------------------

class Calibrator:
    """Shares one set of simulated null copies across methods and partitions.

    Parameters
    ----------
    data : PanelDataset
        Observed data with coordinates.
    candidates : CandidateSet or None
        k-medoids partitions for k = 2..k_max. Only the UNIT method works without them.
    B : int
        Number of simulated copies.
    seed : int
        Root seed; copy ``b`` uses its own substream.
    model : NullModel, optional
        Pre-fitted model, e.g. to reuse the QMLE across calls.
    orbit_draws : int, optional
        Monte Carlo orbit size for CRS when k exceeds the enumeration limit.
    """

    def __init__(self, data: PanelDataset, candidates: CandidateSet | None, B: int, seed: int,
                 model: NullModel | None = None, orbit_draws: int | None = None):
        if B < 1:
            raise InputError("B must be >= 1")
        self.data, self.candidates, self.B, self.seed = data, candidates, B, int(seed)
        self.orbit_draws = orbit_draws
        self.fit = full_fit(data)
        self.model = model or fit_null_model(data, self.fit)
        self.ys, self.xs = simulate_arrays(data, self.model, 0.0, B, self.seed)
        self.alts = alt_grid(data.n)
        self.thetas = np.concatenate([[0.0], self.alts])
        self._cache: dict[tuple[Method, int], _Scores | str] = {}

    def partition(self, method: Method, k: int | None = None) -> Partition:
        if method is Method.UNIT:
            return self.data.unit_partition()
        if self.candidates is None:
            raise InputError("candidate partitions are required for IM, CRS and CCE")
        return self.candidates[k]

    def ks(self, method: Method) -> list[int]:
        if method is Method.UNIT:
            return [self.data.unit_partition().k]
        return self.candidates.ks()

    def _signs(self, k: int) -> np.ndarray:
        if k <= MAX_ENUMERATED_CLUSTERS and self.orbit_draws is None:
            return sign_matrix(k)
        draws = self.orbit_draws or 2 ** MAX_ENUMERATED_CLUSTERS
        return sampled_signs(k, draws, np.random.default_rng([self.seed, k]))

    def _compute(self, method: Method, k: int) -> _Scores:
        part = self.partition(method, k)
        signs = self._signs(part.k) if method is Method.CRS else None
        return score_copies(self.data, method, part, self.ys, self.xs, self.thetas, self.fit, signs)

    def scores(self, method, k: int | None = None) -> _Scores:
        """Statistics for ``method`` on partition ``k``; raises NumericalError if infeasible."""
        method = Method.parse(method)
        k = self.ks(method)[0] if method is Method.UNIT else k
        key = (method, k)
        if key not in self._cache:
            try:
                self._cache[key] = self._compute(method, k)
            except NumericalError as exc:
                self._cache[key] = f"{type(exc).__name__}: {exc}"
        hit = self._cache[key]
        if isinstance(hit, str):
            raise NumericalError(f"k={k} infeasible for {method.value}: {hit}")
        return hit

    def type1_grid(self, method, alpha: float = 0.05, a_grid=None) -> ErrorGrid:
        method = Method.parse(method)
        _check_alpha(alpha)
        grid = ErrorGrid(method, self.B, self.alts)
        for k in self.ks(method):
            try:
                sc = self.scores(method, k)
            except NumericalError as exc:
                grid.infeasible[k] = str(exc)
                log.info("%s: %s", method.value, exc)
                continue
            levels = a_grid_for(method, alpha, sc.k) if a_grid is None else np.asarray(a_grid, dtype=float)
            grid.a_grid[k] = levels
            grid.type1[k] = sc.rates(levels)[:, 0]
        return grid

    def calibrate(self, method, alpha: float = 0.05, a_grid=None) -> CalibrationResult:
        """Select (alpha_hat, k_hat): maximize average power subject to simulated size <= alpha."""
        method = Method.parse(method)
        grid = self.type1_grid(method, alpha, a_grid)
        if not grid.type1:
            raise CalibrationError(
                f"{method.value}: every candidate k is infeasible; use a smaller k_max"
            )
        best_k, best_power = None, -1.0
        for k in sorted(grid.type1):
            a = select_alpha(grid.type1[k], alpha, grid.a_grid[k])
            grid.alpha_by_k[k] = a
            power = self.scores(method, k).rates([a])[0, 1:] if a > 0 else np.zeros(self.alts.size)
            grid.power_by_alt[k] = power
            avg = float(power.mean())
            grid.type2_avg[k] = 1.0 - avg
            if avg > best_power + 1e-12:
                best_k, best_power = k, avg
        return CalibrationResult(method, best_k, grid.alpha_by_k[best_k], grid, self.seed, alpha,
                                 self.partition(method, best_k))

    def rejections(self, method, k: int | None, a: float) -> np.ndarray:
        """Per-copy rejection indicators at the null and each alternative, shape (21, B)."""
        return self.scores(method, k).rejects([a])[0]


def _check_alpha(alpha: float) -> None:
    if not 0 < alpha < 1:
        raise InputError(f"alpha must lie in (0, 1), got {alpha}")


def type1_grid(data: PanelDataset, candidates: CandidateSet, method, a_grid, B: int, seed: int,
               alpha: float = 0.05) -> ErrorGrid:
    return Calibrator(data, candidates, B, seed).type1_grid(method, alpha, a_grid)


def type2_and_select(data: PanelDataset, candidates: CandidateSet, method, alpha: float, B: int,
                     seed: int) -> CalibrationResult:
    return Calibrator(data, candidates, B, seed).calibrate(method, alpha)


# --- confidence intervals ---------------------------------------------------------

class Interval(tuple):
    """``(lo, hi)``; an infinite endpoint marks an interval that reached the search grid's edge."""

    def __new__(cls, lo: float, hi: float):
        return super().__new__(cls, (float(lo), float(hi)))

    @property
    def lo(self) -> float:
        return self[0]

    @property
    def hi(self) -> float:
        return self[1]

    @property
    def unbounded(self) -> bool:
        return math.isinf(self[0]) or math.isinf(self[1])


def _crs_accepts(est: np.ndarray, n: int, theta: float, a: float, signs: np.ndarray) -> bool:
    s = math.sqrt(n / est.size) * (est - theta)
    p = _crs_pvalues(s[None, :], signs)[0]
    return not p <= a + P_TOL


def _bisect(accept, inside: float, outside: float, scale: float) -> float:
    tol = 1e-4 * max(abs(inside), scale, 1e-12)
    while abs(outside - inside) > tol:
        mid = 0.5 * (inside + outside)
        if accept(mid):
            inside = mid
        else:
            outside = mid
    return inside


def invert_test(accept, center: float, halfwidth: float, points: int = 401, scale: float | None = None) -> Interval:
    """Smallest interval enclosing the accepted points of a symmetric grid, endpoints bisected."""
    grid = center + np.linspace(-halfwidth, halfwidth, points)
    ok = np.array([accept(t) for t in grid])
    if not ok.any():
        raise DegenerateIntervalError("no value on the search grid is accepted")
    i, j = np.flatnonzero(ok)[[0, -1]]
    scale = halfwidth / points if scale is None else scale
    lo = -math.inf if i == 0 else _bisect(accept, grid[i], grid[i - 1], scale)
    hi = math.inf if j == points - 1 else _bisect(accept, grid[j], grid[j + 1], scale)
    return Interval(lo, hi)


def point_estimate(data: PanelDataset, method, partition: Partition) -> tuple[float, float]:
    """(estimate, standard error): cluster average for IM/CRS, full sample for CCE/UNIT."""
    method = Method.parse(method)
    if method in (Method.IM, Method.CRS):
        est = cluster_estimates(data, partition)
        return float(est.mean()), float(np.std(est, ddof=1) / math.sqrt(est.size))
    fr = full_fit(data)
    return fr.theta_hat, math.sqrt(cce_variance(data, partition, fr))


def confidence_interval(data: PanelDataset, result: CalibrationResult, grid_halfwidth: float | None = None,
                        grid_points: int = 401, a: float | None = None) -> Interval:
    """Confidence set of the calibrated test, reported as an interval.

    IM, CCE and UNIT use the closed form ``estimate +- critical value * se``;
    CRS inverts the test over a grid of ``grid_points`` values centered at the
    cluster average (default half width ``10 * se``) and bisects the
    endpoints. A zero level gives an unbounded interval.
    """
    method = result.method
    a = result.alpha_hat if a is None else a
    part = result.partition
    est, se = point_estimate(data, method, part)
    if a <= 0:
        return Interval(-math.inf, math.inf)
    k = part.k
    if method is Method.IM:
        half = float(t_quantile(a, k - 1)) * se
        return Interval(est - half, est + half)
    if method in (Method.CCE, Method.UNIT):
        half = float(cce_critical_value(a, k)) * se
        return Interval(est - half, est + half)
    ests = cluster_estimates(data, part)
    signs = sign_matrix(k) if k <= MAX_ENUMERATED_CLUSTERS else sampled_signs(
        k, 2 ** MAX_ENUMERATED_CLUSTERS, np.random.default_rng([result.seed, k]))
    halfwidth = grid_halfwidth if grid_halfwidth is not None else 10.0 * max(se, 1e-12)
    return invert_test(lambda t: _crs_accepts(ests, data.n, t, a, signs), est, halfwidth, grid_points, se)
