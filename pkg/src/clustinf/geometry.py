"""Dissimilarity construction, validation and partition regularity diagnostics."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial import ConvexHull

from .errors import InputError, InvalidPartitionError
from .partition import Partition

log = logging.getLogger(__name__)

METRIC_TOL = 1e-9


class Location(NamedTuple):
    lat: float
    lon: float
    period: int = 1


def location_arrays(locations) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(coords, periods)`` for a list of :class:`Location` or an array.

    An ``(n, 2)`` array is read as (lat, lon) with every period equal to 1;
    an ``(n, 3)`` array carries the period in its last column.
    """
    if isinstance(locations, np.ndarray):
        arr = np.asarray(locations, dtype=float)
        if arr.ndim != 2 or arr.shape[1] not in (2, 3):
            raise InputError("location array must have shape (n, 2) or (n, 3)")
        coords = arr[:, :2]
        periods = arr[:, 2].astype(int) if arr.shape[1] == 3 else np.ones(len(arr), dtype=int)
    else:
        locations = list(locations)
        coords = np.array([[loc.lat, loc.lon] for loc in locations], dtype=float).reshape(-1, 2)
        periods = np.array([loc.period for loc in locations], dtype=int)
    if len(coords) == 0:
        raise InputError("no locations given")
    if not np.all(np.isfinite(coords)):
        bad = np.flatnonzero(~np.isfinite(coords).all(axis=1))
        raise InputError(f"non-finite coordinates at rows {bad.tolist()[:10]}")
    if np.any(periods < 1):
        raise InputError("periods must be >= 1")
    return coords, periods


def pairwise_distance(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def geo_dissimilarity(locations) -> np.ndarray:
    """Euclidean distance between (lat, lon) pairs, ignoring the period.

    Observations of the same unit in different periods are at distance 0.
    """
    coords, _ = location_arrays(locations)
    d = pairwise_distance(coords)
    np.fill_diagonal(d, 0.0)
    return d


@dataclass
class ValidationReport:
    asymmetric: list[tuple[int, int]] = field(default_factory=list)
    negative: list[tuple[int, int]] = field(default_factory=list)
    nonzero_diagonal: list[int] = field(default_factory=list)
    triangle: list[tuple[int, int, int]] = field(default_factory=list)
    triangle_checked: bool = False

    @property
    def ok(self) -> bool:
        return not (self.asymmetric or self.negative or self.nonzero_diagonal or self.triangle)

    def summary(self) -> str:
        parts = [
            f"{len(self.asymmetric)} asymmetric pairs",
            f"{len(self.negative)} negative entries",
            f"{len(self.nonzero_diagonal)} nonzero diagonal entries",
        ]
        if self.triangle_checked:
            parts.append(f"{len(self.triangle)} triangle violations")
        return ", ".join(parts)


def validate(d, check_triangle: bool = False, tol: float = METRIC_TOL) -> ValidationReport:
    """Report (never raise) structural problems of a dissimilarity matrix.

    The triangle check is O(n^3) and meant for n up to a couple of thousand.
    """
    d = np.asarray(d, dtype=float)
    report = ValidationReport(triangle_checked=check_triangle)
    iu = np.triu_indices(d.shape[0], 1)
    asym = np.abs(d[iu] - d.T[iu]) > tol
    report.asymmetric = list(zip(iu[0][asym].tolist(), iu[1][asym].tolist()))
    neg = np.argwhere(d < -tol)
    report.negative = [tuple(p) for p in neg.tolist()]
    report.nonzero_diagonal = np.flatnonzero(np.abs(np.diag(d)) > tol).tolist()
    if check_triangle:
        for j in range(d.shape[0]):
            # d(i,k) <= d(i,j) + d(j,k) for every (i, k) with j fixed
            slack = d[:, j][:, None] + d[j, :][None, :] - d
            bad = np.argwhere(slack < -tol)
            report.triangle.extend((int(i), j, int(k)) for i, k in bad)
    if not report.ok:
        log.warning("dissimilarity matrix: %s", report.summary())
    return report


def _labels(p) -> np.ndarray:
    if isinstance(p, Partition):
        p.check()
        return p.assignment
    labels = np.asarray(p, dtype=int)
    Partition(assignment=labels).check()
    return labels


def balance_ratio(p) -> float:
    """Smallest over largest cluster size."""
    sizes = np.bincount(_labels(p))
    return float(sizes.min() / sizes.max())


def boundary_fraction(p, d, r: float) -> float:
    """Largest count of within-``r``-of-another-cluster points over the smallest cluster size."""
    if r < 0:
        raise InputError("radius must be nonnegative")
    labels = _labels(p)
    k = labels.max() + 1
    if k < 2:
        raise InvalidPartitionError("boundary fraction needs at least two clusters")
    d = np.asarray(d, dtype=float)
    same = labels[:, None] == labels[None, :]
    dist_out = np.where(same, np.inf, d).min(axis=1)
    counts = np.bincount(labels[dist_out <= r], minlength=k)
    return float(counts.max() / np.bincount(labels).min())


@dataclass(frozen=True)
class BallGrowthRow:
    r: float
    min: int
    mean: float
    max: int


def ball_growth_profile(d, radii: Sequence[float]) -> list[BallGrowthRow]:
    """Closed-ball cardinalities ``|{j : d(i,j) <= r}|`` summarized over centers."""
    radii = np.asarray(radii, dtype=float)
    if np.any(np.diff(radii) < 0):
        raise InputError("radii must be sorted ascending")
    d = np.asarray(d, dtype=float)
    sorted_rows = np.sort(d, axis=1)
    rows = []
    for r in radii:
        sizes = np.array([np.searchsorted(row, r, side="right") for row in sorted_rows])
        rows.append(BallGrowthRow(float(r), int(sizes.min()), float(sizes.mean()), int(sizes.max())))
    return rows


# Rough outline of the Afghan border (lon, lat). Only its convex hull is used,
# to place surrogate district centroids when the real ones are not supplied.
_OUTLINE = np.array([
    (60.5, 29.4), (62.5, 29.4), (66.3, 29.9), (66.7, 31.2), (69.3, 31.9),
    (70.0, 34.0), (71.6, 35.1), (71.2, 36.1), (74.9, 37.2), (73.0, 37.5),
    (70.7, 38.4), (69.3, 37.1), (67.8, 37.2), (66.5, 37.4), (64.5, 36.3),
    (62.5, 35.3), (61.2, 35.6), (60.8, 33.5), (61.5, 31.3), (60.9, 29.8),
])


def surrogate_centroids(n_units: int = 205, seed: int = 20140405) -> np.ndarray:
    """``(n_units, 2)`` array of (lat, lon) drawn uniformly over the outline's hull."""
    hull = _OUTLINE[ConvexHull(_OUTLINE).vertices]
    # fan triangulation of the convex polygon, sampled proportionally to area
    a, b, c = hull[0], hull[1:-1], hull[2:]
    areas = 0.5 * np.abs((b[:, 0] - a[0]) * (c[:, 1] - a[1]) - (c[:, 0] - a[0]) * (b[:, 1] - a[1]))
    rng = np.random.default_rng(seed)
    tri = rng.choice(areas.size, size=n_units, p=areas / areas.sum())
    u, v = rng.random(n_units), rng.random(n_units)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    pts = a + u[:, None] * (b[tri] - a) + v[:, None] * (c[tri] - a)
    return np.column_stack([pts[:, 1], pts[:, 0]])


def reflect_centroids(coords: np.ndarray, lat0: float = 29.0, lon0: float = 75.0) -> np.ndarray:
    """Quadruple a centroid set by mirroring over a latitude and a longitude line."""
    lat, lon = coords[:, 0], coords[:, 1]
    return np.vstack([
        coords,
        np.column_stack([2 * lat0 - lat, lon]),
        np.column_stack([lat, 2 * lon0 - lon]),
        np.column_stack([2 * lat0 - lat, 2 * lon0 - lon]),
    ])


def panel_locations(centroids: np.ndarray, periods: int = 2) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack unit centroids over periods, unit-major: rows (d, e) for e = 1..periods.

    Returns ``(unit_id, period, coords)``.
    """
    n_units = len(centroids)
    unit = np.repeat(np.arange(n_units), periods)
    period = np.tile(np.arange(1, periods + 1), n_units)
    return unit, period, np.repeat(centroids, periods, axis=0)
