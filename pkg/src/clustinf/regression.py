"""OLS and just-identified 2SLS for a scalar coefficient with controls."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import (
    DegenerateInstrumentError,
    InputError,
    SingularDesignError,
    TooSmallClusterError,
)
from .partition import Partition

RANK_TOL = 1e-10
INSTRUMENT_TOL = 1e-10


@dataclass
class PanelDataset:
    """Outcome ``y``, regressor of interest ``x``, controls ``w`` (no intercept
    column; one is appended internally) and an optional excluded instrument
    ``z``. ``unit_id``/``period``/``coords`` locate each row."""

    y: np.ndarray
    x: np.ndarray
    w: np.ndarray
    z: np.ndarray | None = None
    unit_id: np.ndarray | None = None
    period: np.ndarray | None = None
    coords: np.ndarray | None = None
    control_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        n = self.y.size
        self.x = np.asarray(self.x, dtype=float).ravel()
        w = np.asarray(self.w, dtype=float)
        self.w = w.reshape(n, -1) if w.size else np.empty((n, 0))
        if self.z is not None:
            self.z = np.asarray(self.z, dtype=float).ravel()
        self.unit_id = np.arange(n) if self.unit_id is None else np.asarray(self.unit_id)
        self.period = np.ones(n, dtype=int) if self.period is None else np.asarray(self.period, dtype=int)
        if self.coords is not None:
            self.coords = np.asarray(self.coords, dtype=float).reshape(n, 2)
        if not self.control_names:
            self.control_names = [f"w{j + 1}" for j in range(self.w.shape[1])]
        cols = [self.x, *self.w.T] + ([self.z] if self.z is not None else [])
        for name, col in zip(["x", *self.control_names, "z"], cols):
            if col.size != n:
                raise InputError(f"column {name} has length {col.size}, expected {n}")
        if not all(np.all(np.isfinite(c)) for c in [self.y, *cols]):
            raise InputError("dataset contains non-finite values")
        if n <= self.p + 2:
            raise InputError(f"need n > p + 2 observations, have n={n}, p={self.p}")

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.w.shape[1]

    @property
    def is_iv(self) -> bool:
        return self.z is not None

    @property
    def instrument(self) -> np.ndarray:
        return self.z if self.z is not None else self.x

    @property
    def min_cluster_size(self) -> int:
        return self.p + 3

    def controls(self, idx=None) -> np.ndarray:
        w = self.w if idx is None else self.w[idx]
        return np.column_stack([w, np.ones(w.shape[0])])

    def unit_partition(self) -> Partition:
        return Partition.from_labels(self.unit_id)

    def subset(self, idx) -> "PanelDataset":
        idx = np.asarray(idx)
        return PanelDataset(
            y=self.y[idx], x=self.x[idx], w=self.w[idx],
            z=None if self.z is None else self.z[idx],
            unit_id=self.unit_id[idx], period=self.period[idx],
            coords=None if self.coords is None else self.coords[idx],
            control_names=list(self.control_names),
        )


@dataclass
class FitResult:
    theta_hat: float
    coef_controls: np.ndarray  # controls then intercept
    residuals_u: np.ndarray
    used_indices: np.ndarray
    residuals_v: np.ndarray | None = None
    pi_hat: float | None = None
    first_stage_controls: np.ndarray | None = None  # controls then intercept
    partialled_instrument: np.ndarray | None = None  # instrument after partialling controls
    hessian: float = float("nan")  # partialled instrument . x

    @property
    def is_iv(self) -> bool:
        return self.pi_hat is not None


def _qr(a: np.ndarray, names: list[str]):
    q, r, piv = scipy.linalg.qr(a, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > RANK_TOL * diag[0])) if diag.size else 0
    if rank < a.shape[1]:
        col = names[piv[rank]]
        raise SingularDesignError(f"design is rank deficient (column {col!r})", column=col)
    return q, r, piv


def _lstsq(a: np.ndarray, b: np.ndarray, names: list[str]) -> np.ndarray:
    q, r, piv = _qr(a, names)
    coef = np.empty(a.shape[1])
    coef[piv] = scipy.linalg.solve_triangular(r, q.T @ b)
    return coef


def partial_out(controls: np.ndarray, v: np.ndarray, names=None) -> np.ndarray:
    """Residual of ``v`` (vector or columns) after projecting on ``controls``."""
    names = names or [f"c{j}" for j in range(controls.shape[1])]
    q, _, _ = _qr(controls, names)
    return v - q @ (q.T @ v)


def _subset(data: PanelDataset, subset) -> np.ndarray:
    if subset is None:
        return np.arange(data.n)
    idx = np.asarray(subset, dtype=int)
    if idx.size < data.min_cluster_size:
        raise TooSmallClusterError(
            f"subset of size {idx.size} below minimum {data.min_cluster_size} (p + 3)"
        )
    return idx


def ols_fit(data: PanelDataset, subset=None) -> FitResult:
    idx = _subset(data, subset)
    names = ["x", *data.control_names, "const"]
    a = np.column_stack([data.x[idx], data.controls(idx)])
    y = data.y[idx]
    coef = _lstsq(a, y, names)
    resid = y - a @ coef
    xt = partial_out(data.controls(idx), data.x[idx], names[1:])
    return FitResult(
        theta_hat=float(coef[0]), coef_controls=coef[1:], residuals_u=resid,
        used_indices=idx, partialled_instrument=xt, hessian=float(xt @ data.x[idx]),
    )


def iv_fit(data: PanelDataset, subset=None) -> FitResult:
    """Just-identified 2SLS; the first stage is estimated on the same subset."""
    if data.z is None:
        raise InputError("iv_fit needs an instrument column z")
    idx = _subset(data, subset)
    names = ["x", *data.control_names, "const", "z"]
    c = data.controls(idx)
    y, x, z = data.y[idx], data.x[idx], data.z[idx]
    _qr(np.column_stack([x, c]), names[:-1])
    _qr(np.column_stack([z, c]), ["z", *names[1:-1]])
    tilde = partial_out(c, np.column_stack([y, x, z]), names[1:-1])
    yt, xt, zt = tilde.T
    zz = zt @ zt
    pi_hat = float(zt @ x) / zz
    if abs(zt @ xt) <= INSTRUMENT_TOL * np.sqrt(zz * (xt @ xt)):
        raise DegenerateInstrumentError(f"first-stage coefficient on z is {pi_hat:.3g}")
    hessian = float(zt @ x)
    theta = float(zt @ y) / hessian
    coef_controls = _lstsq(c, y - theta * x, names[1:-1])
    fs_controls = _lstsq(c, x - pi_hat * z, names[1:-1])
    return FitResult(
        theta_hat=theta, coef_controls=coef_controls,
        residuals_u=yt - xt * theta, used_indices=idx,
        residuals_v=xt - zt * pi_hat, pi_hat=pi_hat, first_stage_controls=fs_controls,
        partialled_instrument=zt, hessian=hessian,
    )


def fit(data: PanelDataset, subset=None) -> FitResult:
    return iv_fit(data, subset) if data.is_iv else ols_fit(data, subset)


def score_vector(data: PanelDataset, fit_result: FitResult) -> np.ndarray:
    """Per-observation score for theta: partialled instrument times structural residual.

    For OLS the instrument is ``x`` itself. Scores sum to zero by construction.
    """
    return fit_result.partialled_instrument * fit_result.residuals_u


def cluster_estimates(data: PanelDataset, partition: Partition) -> np.ndarray:
    """Within-cluster estimates of theta, one per cluster in label order."""
    return np.array([fit(data, members).theta_hat for members in partition.clusters()])
