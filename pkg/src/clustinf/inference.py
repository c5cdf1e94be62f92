"""Cluster-based tests of H0: theta = theta_star and Moran's I diagnostics."""
from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import (
    DegenerateStatisticError,
    DegenerateVarianceError,
    EnumerationTooLargeError,
    InputError,
)
from .partition import Partition
from .regression import FitResult, PanelDataset, fit as full_fit, score_vector

log = logging.getLogger(__name__)

# 2 * Phi(-sqrt(3)): largest level for which the IM t-test is known to be conservative
IM_LEVEL_CAP = 2.0 * stats.norm.cdf(-math.sqrt(3.0))
MAX_ENUMERATED_CLUSTERS = 20
TIE_RTOL = 1e-10


class Decision(str, enum.Enum):
    REJECT = "Reject"
    FAIL_TO_REJECT = "FailToReject"


@dataclass(frozen=True)
class ClusterStatVector:
    s: np.ndarray
    n: int
    theta_star: float = 0.0

    @property
    def k(self) -> int:
        return self.s.size

    @classmethod
    def from_estimates(cls, estimates, n: int, theta_star: float = 0.0) -> "ClusterStatVector":
        est = np.asarray(estimates, dtype=float)
        if est.size < 2:
            raise InputError("need at least two clusters")
        if not np.all(np.isfinite(est)):
            raise InputError("cluster estimates must be finite")
        return cls(np.sqrt(n / est.size) * (est - theta_star), n, theta_star)


@dataclass(frozen=True)
class TestOutcome:
    decision: Decision
    statistic: float
    threshold: float
    p_value: float
    method: str
    a: float
    k: int

    @property
    def reject(self) -> bool:
        return self.decision is Decision.REJECT


def _as_array(sv) -> np.ndarray:
    return sv.s if isinstance(sv, ClusterStatVector) else np.asarray(sv, dtype=float)


def t_of_s(sv) -> float:
    """Cluster-level t statistic: sqrt(k) * mean / sample sd."""
    s = _as_array(sv)
    k = s.size
    sd = np.std(s, ddof=1)
    if not sd > 0:
        raise DegenerateStatisticError("all cluster statistics are equal")
    return float(s.sum() / math.sqrt(k) / sd)


def _check_level(a: float) -> None:
    if not 0 < a < 1:
        raise InputError(f"level must lie in (0, 1), got {a}")


def t_quantile(a: float, df) -> np.ndarray:
    return stats.t.ppf(1.0 - a / 2.0, df)


def im_test(sv, a: float) -> TestOutcome:
    _check_level(a)
    s = _as_array(sv)
    k = s.size
    if a > IM_LEVEL_CAP:
        warnings.warn(f"IM level {a} exceeds 2*Phi(-sqrt(3)) = {IM_LEVEL_CAP:.4f}", stacklevel=2)
    t = t_of_s(s)
    threshold = float(t_quantile(a, k - 1))
    p = float(2.0 * stats.t.sf(abs(t), k - 1))
    decision = Decision.REJECT if abs(t) > threshold else Decision.FAIL_TO_REJECT
    return TestOutcome(decision, t, threshold, p, "IM", a, k)


def sign_matrix(k: int) -> np.ndarray:
    """All 2**k sign vectors as rows; row 0 is the identity (all +1)."""
    bits = (np.arange(2 ** k)[:, None] >> np.arange(k)[None, :]) & 1
    return 1.0 - 2.0 * bits


def sampled_signs(k: int, draws: int, rng: np.random.Generator) -> np.ndarray:
    h = rng.choice([-1.0, 1.0], size=(draws, k))
    h[0] = 1.0
    return h


def orbit_abs_t(s: np.ndarray, signs: np.ndarray) -> np.ndarray:
    """|t(hS)| for every sign vector h; degenerate orbit points score 0.

    ``s`` may carry leading batch dimensions: shape (..., k) -> (..., M).
    """
    k = s.shape[-1]
    sums = s @ signs.T
    ss = np.sum(s * s, axis=-1, keepdims=True)
    var = (ss - sums * sums / k) / (k - 1)
    ok = var > 1e-13 * ss / (k - 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(ok, np.abs(sums) / np.sqrt(k * np.where(ok, var, 1.0)), 0.0)
    return w


def crs_pvalues(s: np.ndarray, signs: np.ndarray) -> np.ndarray:
    """Share of the orbit with |t(hS)| >= |t(S)|, up to a relative tie tolerance."""
    w = orbit_abs_t(s, signs)
    w0 = w[..., :1]
    return np.mean(w >= w0 - TIE_RTOL * w0, axis=-1)


def _orbit_signs(k: int, orbit_draws: int | None, rng: np.random.Generator | None) -> np.ndarray:
    if orbit_draws is None:
        if k > MAX_ENUMERATED_CLUSTERS:
            raise EnumerationTooLargeError(
                f"k={k} > {MAX_ENUMERATED_CLUSTERS}: full sign enumeration is too large; "
                "use Monte Carlo orbit sampling (--orbit-draws)"
            )
        return sign_matrix(k)
    if rng is None:
        raise InputError("orbit sampling needs a seeded generator")
    return sampled_signs(k, orbit_draws, rng)


def crs_test(
    sv,
    a: float,
    randomized: bool = False,
    rng: np.random.Generator | None = None,
    orbit_draws: int | None = None,
) -> TestOutcome:
    """Sign-change randomization test with statistic |t(S)|.

    With ``j_a = ceil(M (1 - a))`` the test rejects when the observed value
    exceeds the ``j_a``-th order statistic of the orbit. On a tie with that
    order statistic the default rejects only when ``(M a - M+) / M0 >= 1``;
    ``randomized=True`` rejects with that probability instead (needs ``rng``).
    """
    _check_level(a)
    s = _as_array(sv)
    k = s.size
    if k < 2:
        raise InputError("need at least two clusters")
    if randomized and rng is None:
        raise InputError("randomized CRS needs a seeded generator")
    signs = _orbit_signs(k, orbit_draws, rng)
    w = orbit_abs_t(s, signs)
    m = w.size
    w_obs = w[0]
    tol = TIE_RTOL * max(w.max(), np.finfo(float).tiny)
    order = np.sort(w)
    j_a = max(1, math.ceil(m * (1.0 - a) - 1e-9))
    w_ja = order[j_a - 1]
    m_plus = int(np.sum(w > w_ja + tol))
    m_zero = int(np.sum(np.abs(w - w_ja) <= tol))
    a_tilde = (m * a - m_plus) / m_zero
    if w_obs > w_ja + tol:
        reject = True
    elif abs(w_obs - w_ja) <= tol:
        if randomized:
            reject = bool(rng.random() < min(max(a_tilde, 0.0), 1.0))
        else:
            reject = a_tilde >= 1.0 - 1e-12
    else:
        reject = False
    p = float(np.mean(w >= w_obs - tol))
    decision = Decision.REJECT if reject else Decision.FAIL_TO_REJECT
    return TestOutcome(decision, float(w_obs), float(w_ja), p, "CRS", a, k)


def _check_partition(data: PanelDataset, partition: Partition) -> None:
    partition.check()
    if partition.n != data.n:
        raise InputError(f"partition covers {partition.n} indices, dataset has {data.n}")


def cce_variance(data: PanelDataset, partition: Partition, fit_result: FitResult | None = None) -> float:
    """Cluster-robust variance of the full-sample estimate, no small-sample correction."""
    _check_partition(data, partition)
    fit_result = fit_result or full_fit(data)
    g = score_vector(data, fit_result)
    sums = np.bincount(partition.assignment, weights=g, minlength=partition.k)
    v = float(sums @ sums) / fit_result.hessian ** 2
    if is_degenerate_variance(v, g, fit_result.hessian):
        log.warning("cluster variance is numerically zero")
    return v


def is_degenerate_variance(v: float, scores: np.ndarray, hessian: float) -> bool:
    return not v > 1e-20 * float(scores @ scores) / hessian ** 2


def cce_critical_value(a: float, k) -> np.ndarray:
    return np.sqrt(k / (k - 1.0)) * t_quantile(a, k - 1)


def cce_test(
    data: PanelDataset,
    partition: Partition,
    theta_star: float,
    a: float,
    fit_result: FitResult | None = None,
    method: str = "CCE",
) -> TestOutcome:
    _check_level(a)
    fit_result = fit_result or full_fit(data)
    v = cce_variance(data, partition, fit_result)
    if is_degenerate_variance(v, score_vector(data, fit_result), fit_result.hessian):
        raise DegenerateVarianceError("cluster variance is zero")
    k = partition.k
    stat = abs(fit_result.theta_hat - theta_star) / math.sqrt(v)
    scale = math.sqrt(k / (k - 1.0))
    threshold = float(cce_critical_value(a, k))
    p = float(2.0 * stats.t.sf(stat / scale, k - 1))
    decision = Decision.REJECT if stat > threshold else Decision.FAIL_TO_REJECT
    return TestOutcome(decision, stat, threshold, p, method, a, k)


def unit_test(data: PanelDataset, theta_star: float, a: float, fit_result: FitResult | None = None) -> TestOutcome:
    """CCE with one cluster per cross-sectional unit."""
    return cce_test(data, data.unit_partition(), theta_star, a, fit_result, method="UNIT")


# --- Moran's I --------------------------------------------------------------

@dataclass(frozen=True)
class MoranResult:
    I: float
    expected: float
    variance: float
    z: float
    p_value: float


def moran_i(scores, weights) -> MoranResult:
    """Moran's I of ``scores`` against ``weights`` with normal-approximation moments.

    Scores are centered first. ``z`` is the standardized statistic and the
    p-value is two-sided.
    """
    y = np.asarray(scores, dtype=float).ravel()
    w = np.asarray(weights, dtype=float)
    n = y.size
    if w.shape != (n, n):
        raise InputError(f"weights must be {n}x{n}")
    if np.any(w < 0) or np.any(np.diag(w) != 0):
        raise InputError("weights must be nonnegative with a zero diagonal")
    s0 = w.sum()
    if s0 <= 0:
        raise InputError("weights are all zero")
    zc = y - y.mean()
    denom = zc @ zc
    if not denom > 0:
        raise DegenerateStatisticError("score vector is constant")
    stat = n / s0 * (zc @ w @ zc) / denom
    sym = w + w.T
    s1 = 0.5 * np.sum(sym * sym)
    s2 = np.sum((w.sum(axis=1) + w.sum(axis=0)) ** 2)
    expected = -1.0 / (n - 1)
    var = (n * n * s1 - n * s2 + 3.0 * s0 * s0) / ((n * n - 1.0) * s0 * s0) - expected ** 2
    z = (stat - expected) / math.sqrt(var)
    return MoranResult(float(stat), expected, float(var), float(z), float(2.0 * stats.norm.sf(abs(z))))


def knn_weights(coords, k: int = 2, mask=None) -> np.ndarray:
    """Binary weights linking each row to its ``k`` nearest rows (ties by index).

    Rows outside ``mask`` get no neighbors and are never chosen as neighbors.
    """
    coords = np.asarray(coords, dtype=float)
    n = len(coords)
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    idx = np.flatnonzero(mask)
    if idx.size <= k:
        raise InputError("not enough observations for the requested neighbors")
    diff = coords[idx, None, :] - coords[None, idx, :]
    d = np.sqrt(np.sum(diff * diff, axis=-1))
    np.fill_diagonal(d, np.inf)
    nearest = np.argsort(d, axis=1, kind="stable")[:, :k]
    w = np.zeros((n, n))
    w[np.repeat(idx, k), idx[nearest.ravel()]] = 1.0
    return w


def same_unit_weights(unit_id) -> np.ndarray:
    unit_id = np.asarray(unit_id)
    w = (unit_id[:, None] == unit_id[None, :]).astype(float)
    np.fill_diagonal(w, 0.0)
    return w
