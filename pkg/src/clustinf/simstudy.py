"""Monte Carlo study of the calibrated cluster tests on a district panel.

Two periods of observations on ``n_units`` district centroids. Regressors are
drawn once and held fixed; errors are redrawn every replication, either from
the exponential covariance model (BASELINE) or from a spatial autoregression
(SAR). Each replication refits the exponential model by QMLE, calibrates every
method on ``B`` simulated copies and tests ``H0: theta = t`` over a grid of
``t`` on the replication's data.
"""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from . import calibration as cal
from .clustering import build_candidates, default_k_max
from .covmodel import CovarianceParams, cholesky, exp_cov
from .errors import CalibrationError, ClustinfError, InputError, NumericalError
from .geometry import geo_dissimilarity, pairwise_distance, panel_locations, reflect_centroids, surrogate_centroids
from .regression import PanelDataset, cluster_estimates

log = logging.getLogger(__name__)

TRUE_TAU = CovarianceParams(0.0, 3.0, 1.0)
PI0 = 2.0
ERROR_CORR = 0.8
REGRESSOR_CORR = 0.5
N_CONTROLS = 10
SAR_COEF = 0.15
SAR_RADIUS = 0.3
MAX_FAILURE_RATE = 0.05
STUDY_METHODS = ("UNIT-U", "UNIT", "CCE", "IM", "CRS")
_REG_TAG, _ERR_TAG, _CAL_TAG = 101, 202, 303


@dataclass(frozen=True)
class DesignSpec:
    model: str = "OLS"
    error: str = "BASELINE"
    n_units: int = 205
    periods: int = 2
    reps: int = 200
    B: int = 200
    seed: int = 0
    alpha: float = 0.05
    k_max: int | None = None
    centroids: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "model", self.model.upper())
        object.__setattr__(self, "error", self.error.upper())
        if self.model not in ("OLS", "IV"):
            raise InputError(f"model must be OLS or IV, got {self.model}")
        if self.error not in ("BASELINE", "SAR"):
            raise InputError(f"error must be BASELINE or SAR, got {self.error}")
        if self.reps < 1 or self.B < 1:
            raise InputError("reps and B must be >= 1")
        if not 0 < self.alpha < 1:
            raise InputError("alpha must lie in (0, 1)")

    @property
    def name(self) -> str:
        return f"{self.model.lower()}x{self.error.lower()}"

    @property
    def n(self) -> int:
        return self.n_units * self.periods

    def unit_centroids(self) -> np.ndarray:
        """Centroids as (lat, lon); the 4x design mirrors the base set."""
        if self.centroids is not None:
            base = np.asarray(self.centroids, dtype=float)
        else:
            base = surrogate_centroids(min(self.n_units, 205))
        if len(base) == self.n_units:
            return base
        if 4 * len(base) == self.n_units:
            return reflect_centroids(base)
        raise InputError(f"cannot build {self.n_units} centroids from {len(base)}")

    def resolved_k_max(self) -> int:
        if self.k_max is not None:
            return self.k_max
        return 12 if self.n_units == 820 else default_k_max(self.n)


def _layout(spec: DesignSpec):
    unit, period, coords = panel_locations(spec.unit_centroids(), spec.periods)
    return unit, period, coords


def gen_regressors(spec: DesignSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed draw of the regressor of interest (instrument for IV) and the controls.

    Every variable has the exponential spatial correlation ``R``; variables
    correlate 0.5 with each other. The joint covariance is ``C kron R`` with
    ``C = 0.5 J + 0.5 I``, so cross-variable correlation across locations is
    ``0.5 R`` (exact zero there is not positive definite on these layouts).

    Returns ``(x_or_z, w)`` with shapes ``(n,)`` and ``(n, 10)``.
    """
    _, period, coords = _layout(spec)
    lr = cholesky(exp_cov(TRUE_TAU, coords, period), scale=1.0)
    m = N_CONTROLS + 1
    lc = np.linalg.cholesky(REGRESSOR_CORR * np.ones((m, m)) + (1 - REGRESSOR_CORR) * np.eye(m))
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_REG_TAG,)))
    xi = rng.standard_normal((spec.n, m))
    v = lr @ xi @ lc.T
    return v[:, 0], v[:, 1:]


def gen_errors_baseline(spec: DesignSpec, rep_seed, chol: np.ndarray | None = None):
    """``U`` (OLS) or ``(U, V)`` (IV) with exponential covariance and tau = (0, 3, 1).

    For IV, ``V = L (0.8 xi_U + 0.6 xi_V)`` so ``cov(U, V) = 0.8 R``, the
    lower-triangular construction used for simulation copies.
    """
    if chol is None:
        _, period, coords = _layout(spec)
        chol = cholesky(exp_cov(TRUE_TAU, coords, period), scale=1.0)
    rng = np.random.default_rng(rep_seed)
    xu = rng.standard_normal(spec.n)
    u = chol @ xu
    if spec.model == "OLS":
        return u
    xv = ERROR_CORR * xu + math.sqrt(1 - ERROR_CORR ** 2) * rng.standard_normal(spec.n)
    return u, chol @ xv


def sar_adjacency(centroids: np.ndarray, radius: float = SAR_RADIUS) -> np.ndarray:
    d = pairwise_distance(np.asarray(centroids, dtype=float))
    a = (d < radius).astype(float)
    np.fill_diagonal(a, 0.0)
    return a


def sar_operator(centroids: np.ndarray, coef: float = SAR_COEF, radius: float = SAR_RADIUS):
    """LU factors of ``I - coef * A``; raises if the system is singular."""
    a = sar_adjacency(centroids, radius)
    eig = np.linalg.eigvalsh(a)
    if np.min(np.abs(1.0 - coef * eig)) < 1e-10:
        raise NumericalError(f"SAR system singular: spectral radius of A is {np.max(np.abs(eig)):.4g}")
    return scipy.linalg.lu_factor(np.eye(len(a)) - coef * a), a


def gen_errors_sar(spec: DesignSpec, rep_seed, operator=None):
    """SAR errors ``(I - 0.15 A) U_e = eps_e`` for each period ``e``.

    Innovations are independent across districts with correlation
    ``exp(-1)`` between a district's two periods. For IV, ``eta`` is built
    from the same within-district factor, ``eta = L (0.8 z_eps + 0.6 z_eta)``.
    """
    centroids = spec.unit_centroids()
    lu = (operator or sar_operator(centroids))[0]
    tgap = np.abs(np.subtract.outer(np.arange(spec.periods), np.arange(spec.periods)))
    lp = np.linalg.cholesky(np.exp(-tgap / TRUE_TAU.tau3))
    rng = np.random.default_rng(rep_seed)

    def one(z):
        eps = z @ lp.T  # (units, periods)
        return scipy.linalg.lu_solve(lu, eps).ravel()  # unit-major

    ze = rng.standard_normal((spec.n_units, spec.periods))
    u = one(ze)
    if spec.model == "OLS":
        return u
    zh = ERROR_CORR * ze + math.sqrt(1 - ERROR_CORR ** 2) * rng.standard_normal((spec.n_units, spec.periods))
    return u, one(zh)


# --- study ----------------------------------------------------------------------

@dataclass
class _Context:
    spec: DesignSpec
    unit: np.ndarray
    period: np.ndarray
    coords: np.ndarray
    regressor: np.ndarray
    controls: np.ndarray
    candidates: object
    thetas: np.ndarray
    methods: tuple
    chol: np.ndarray | None = None
    sar: object = None


def _context(spec: DesignSpec, methods) -> _Context:
    unit, period, coords = _layout(spec)
    reg, w = gen_regressors(spec, spec.seed)
    cands = build_candidates(geo_dissimilarity(coords), k_max=spec.resolved_k_max(), seed=spec.seed)
    j = np.arange(-cal.N_ALT, cal.N_ALT + 1)
    ctx = _Context(spec, unit, period, coords, reg, w, cands, j / math.sqrt(spec.n), tuple(methods))
    if spec.error == "BASELINE":
        ctx.chol = cholesky(exp_cov(TRUE_TAU, coords, period), scale=1.0)
    else:
        ctx.sar = sar_operator(spec.unit_centroids())
    return ctx


def _dataset(ctx: _Context, r: int) -> PanelDataset:
    spec = ctx.spec
    ss = np.random.SeedSequence(spec.seed, spawn_key=(_ERR_TAG, r))
    errs = gen_errors_baseline(spec, ss, ctx.chol) if spec.error == "BASELINE" else gen_errors_sar(spec, ss, ctx.sar)
    if spec.model == "OLS":
        return PanelDataset(errs, ctx.regressor, ctx.controls, None, ctx.unit, ctx.period, ctx.coords)
    u, v = errs
    return PanelDataset(u, PI0 * ctx.regressor + v, ctx.controls, ctx.regressor, ctx.unit, ctx.period, ctx.coords)


def _cal_seed(seed: int, r: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(_CAL_TAG, r)).generate_state(1)[0])


def run_replication(ctx: _Context, r: int) -> dict:
    """One replication: returns per-method estimate, rejections over the theta grid, k_hat, alpha_hat."""
    spec = ctx.spec
    data = _dataset(ctx, r)
    calib = cal.Calibrator(data, ctx.candidates, spec.B, _cal_seed(spec.seed, r))
    out = {}
    for name in ctx.methods:
        if name == "UNIT-U":
            part, a, k_hat = data.unit_partition(), spec.alpha, None
            method = cal.Method.UNIT
        else:
            method = cal.Method.parse(name)
            res = calib.calibrate(method, spec.alpha)
            part, a, k_hat = res.partition, res.alpha_hat, res.k_hat
        scores = cal.score_copies(data, method, part, data.y, None if not data.is_iv else data.x,
                                  ctx.thetas, calib.fit)
        rejects = scores.rejects([a])[0][:, 0]
        if method in (cal.Method.IM, cal.Method.CRS):
            est = float(cluster_estimates(data, part).mean())
        else:
            est = calib.fit.theta_hat
        out[name] = {"est": est, "rejects": rejects, "k_hat": k_hat, "alpha_hat": a}
    return out


_WORKER_CTX: _Context | None = None


def _init_worker(spec, methods):
    global _WORKER_CTX
    _WORKER_CTX = _context(spec, methods)


def _guarded(ctx: _Context, r: int):
    try:
        return run_replication(ctx, r)
    except ClustinfError as exc:
        log.info("replication %d failed: %s", r, exc)
        return f"{type(exc).__name__}: {exc}"


def _worker(r: int):
    return _guarded(_WORKER_CTX, r)


@dataclass
class StudyReport:
    spec: DesignSpec
    methods: tuple
    thetas: np.ndarray
    k_max: int
    estimates: dict = field(default_factory=dict)
    rejects: dict = field(default_factory=dict)
    k_hat: dict = field(default_factory=dict)
    alpha_hat: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def completed(self) -> int:
        return len(next(iter(self.estimates.values()))) if self.estimates else 0

    def size(self, method: str) -> float:
        return float(self.power_curve(method)[cal.N_ALT])

    def power_curve(self, method: str) -> np.ndarray:
        return np.asarray(self.rejects[method], dtype=float).mean(axis=0)

    def point_summary(self, method: str) -> tuple[float, float]:
        """(bias, RMSE) for OLS; (median bias, median absolute error) for IV."""
        err = np.asarray(self.estimates[method])  # true theta is 0
        if self.spec.model == "OLS":
            return float(err.mean()), float(np.sqrt(np.mean(err ** 2)))
        return float(np.median(err)), float(np.median(np.abs(err)))

    def khat_freq(self, method: str) -> dict[int, float]:
        ks = np.asarray(self.k_hat[method])
        return {k: float(np.mean(ks == k)) for k in range(2, self.k_max + 1)}

    def alpha_quantiles(self, method: str, qs=(0.1, 0.25, 0.5, 0.75, 0.9)) -> list[float]:
        return [float(v) for v in np.quantile(np.asarray(self.alpha_hat[method]), qs)]

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        fmt = _fmt
        calibrated = [m for m in self.methods if m != "UNIT-U"]
        clustered = [m for m in calibrated if m != "UNIT"]
        first, second = ("bias", "rmse") if self.spec.model == "OLS" else ("median_bias", "mad")
        tables = {
            "summary.csv": (["design", "method", first, second, "size", "reps"],
                            [[self.spec.name, m, *map(fmt, self.point_summary(m)), fmt(self.size(m)), self.completed]
                             for m in self.methods]),
            "khat.csv": (["method", *[str(k) for k in range(2, self.k_max + 1)]],
                         [[m, *[fmt(v) for v in self.khat_freq(m).values()]] for m in clustered]),
            "alphahat.csv": (["method", "q10", "q25", "q50", "q75", "q90"],
                             [[m, *map(fmt, self.alpha_quantiles(m))] for m in calibrated]),
            "power.csv": (["method", "theta", "rejection_rate"],
                          [[m, fmt(t), fmt(p)] for m in self.methods
                           for t, p in zip(self.thetas, self.power_curve(m))]),
        }
        paths = []
        for name, (header, rows) in tables.items():
            path = out / name
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                w.writerows(rows)
            paths.append(path)
        return paths


def _fmt(v) -> str:
    return "%.6g" % v


def run_study(spec: DesignSpec, methods=STUDY_METHODS, threads: int = 1) -> StudyReport:
    """Run ``spec.reps`` replications, optionally across ``threads`` worker processes.

    Results depend only on ``spec`` (each replication has its own seed
    substreams), never on ``threads``. Raises CalibrationError when more
    than 5% of replications fail.
    """
    methods = tuple(m.upper() for m in methods)
    for m in methods:
        if m != "UNIT-U":
            cal.Method.parse(m)
    start = time.perf_counter()
    if threads > 1 and spec.reps > 1:
        with ProcessPoolExecutor(max_workers=threads, initializer=_init_worker, initargs=(spec, methods)) as pool:
            results = list(pool.map(_worker, range(spec.reps), chunksize=max(1, spec.reps // (4 * threads))))
        k_max = spec.resolved_k_max()
    else:
        ctx = _context(spec, methods)
        results = [_guarded(ctx, r) for r in range(spec.reps)]
        k_max = ctx.candidates.k_max
    j = np.arange(-cal.N_ALT, cal.N_ALT + 1)
    report = StudyReport(spec, methods, j / math.sqrt(spec.n), k_max)
    for m in methods:
        report.estimates[m], report.rejects[m], report.k_hat[m], report.alpha_hat[m] = [], [], [], []
    for r, res in enumerate(results):
        if isinstance(res, str):
            report.failures.append((r, res))
            continue
        for m in methods:
            report.estimates[m].append(res[m]["est"])
            report.rejects[m].append(res[m]["rejects"])
            report.k_hat[m].append(res[m]["k_hat"])
            report.alpha_hat[m].append(res[m]["alpha_hat"])
    report.elapsed = time.perf_counter() - start
    log.info("%s: %d replications, %d failures, %.1fs", spec.name, spec.reps, len(report.failures), report.elapsed)
    if len(report.failures) > MAX_FAILURE_RATE * spec.reps:
        detail = "; ".join(f"rep {r}: {msg}" for r, msg in report.failures[:5])
        raise CalibrationError(f"{len(report.failures)}/{spec.reps} replications failed ({detail})")
    return report


def default_threads() -> int:
    return os.cpu_count() or 1
