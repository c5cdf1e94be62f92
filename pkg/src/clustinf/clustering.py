"""k-medoids with squared-dissimilarity cost and first-improvement swaps."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .partition import Partition

log = logging.getLogger(__name__)

_REL_TOL = 1e-12


def cluster_cost(d, members, medoid: int) -> float:
    """Sum of squared dissimilarities from ``medoid`` to every member."""
    members = np.asarray(members, dtype=int)
    if members.size == 0:
        return 0.0
    row = np.asarray(d, dtype=float)[medoid, members]
    return float(np.dot(row, row))


def total_cost(d, partition: Partition) -> float:
    return sum(
        cluster_cost(d, members, partition.medoids[g])
        for g, members in enumerate(partition.clusters())
    )


def default_k_max(n: int) -> int:
    """Smallest integer m with m**3 >= n, i.e. ceil(n ** (1/3)) without float error."""
    m = max(int(round(n ** (1.0 / 3.0))) - 1, 1)
    while m ** 3 < n:
        m += 1
    return m


def _pick(values: np.ndarray, target: float, rng: np.random.Generator) -> int:
    tied = np.flatnonzero(values == target)
    return int(tied[0]) if tied.size == 1 else int(rng.choice(tied))


def _seed_medoids(d2: np.ndarray, k: int, rng: np.random.Generator, random_first: bool) -> list[int]:
    if random_first:
        medoids = [int(rng.integers(d2.shape[0]))]
    else:
        totals = d2.sum(axis=1)
        medoids = [_pick(totals, totals.min(), rng)]
    nearest = d2[:, medoids[0]].copy()
    for _ in range(1, k):
        far = nearest.max()
        if far <= 0:
            raise InputError(f"fewer than k={k} distinct points")
        j = _pick(nearest, far, rng)
        medoids.append(j)
        np.minimum(nearest, d2[:, j], out=nearest)
    return medoids


def _swap_costs(d2: np.ndarray, medoids: list[int], g: int) -> np.ndarray:
    """Total cost after replacing medoid position ``g`` by each candidate index."""
    others = medoids[:g] + medoids[g + 1:]
    base = d2[:, others].min(axis=1)
    return np.minimum(base[:, None], d2).sum(axis=0)


def _swap_search(d2: np.ndarray, medoids: list[int]) -> tuple[list[int], list[float]]:
    n, k = d2.shape[0], len(medoids)
    cost = float(d2[:, medoids].min(axis=1).sum())
    trace = [cost]
    improved = True
    while improved:
        improved = False
        for g in range(k):
            start = 0
            while start < n:
                costs = _swap_costs(d2, medoids, g)
                costs[medoids] = np.inf
                better = np.flatnonzero(cost - costs[start:] > _REL_TOL * cost)
                if better.size == 0:
                    break
                j = start + int(better[0])
                medoids[g] = j
                cost = float(costs[j])
                trace.append(cost)
                improved = True
                start = j + 1
    return medoids, trace


def assign(d, medoids) -> np.ndarray:
    """Nearest medoid per index; ties go to the lowest medoid position."""
    d = np.asarray(d, dtype=float)
    medoids = np.asarray(medoids, dtype=int)
    labels = np.argmin(d[:, medoids], axis=1)
    labels[medoids] = np.arange(medoids.size)
    return labels


@dataclass(frozen=True)
class KMedoidsResult:
    partition: Partition
    cost: float
    trace: tuple[float, ...]


def k_medoids(d, k: int, seed: int = 0, restarts: int = 1, return_trace: bool = False):
    """Partition ``n`` indices into ``k`` clusters around medoids.

    Starts from greedy farthest-point seeding (first medoid minimizes the
    total squared dissimilarity) and applies first-improvement single swaps,
    scanning medoid positions in order and candidates in ascending index,
    until a full pass makes no improvement. ``seed`` only breaks exact ties
    during seeding. Extra restarts begin from a seeded random first medoid;
    the lowest-cost result is kept.

    Returns a :class:`Partition` with medoids sorted ascending, or a
    :class:`KMedoidsResult` when ``return_trace`` is set.
    """
    d = np.asarray(d, dtype=float)
    n = d.shape[0]
    if d.ndim != 2 or d.shape[1] != n:
        raise InputError("dissimilarity must be a square matrix")
    if not 2 <= k <= n:
        raise InputError(f"k must satisfy 2 <= k <= n={n}, got {k}")
    if restarts < 1:
        raise InputError("restarts must be >= 1")
    d2 = d * d
    rng = np.random.default_rng(seed)
    best = None
    for r in range(restarts):
        init = _seed_medoids(d2, k, rng, random_first=r > 0)
        medoids, trace = _swap_search(d2, init)
        if best is None or trace[-1] < best[1][-1]:
            best = (medoids, trace)
    medoids = np.sort(np.asarray(best[0], dtype=int))
    partition = Partition(assignment=assign(d, medoids), medoids=medoids, k=k)
    partition.check()
    if return_trace:
        return KMedoidsResult(partition, best[1][-1], tuple(best[1]))
    return partition


@dataclass(frozen=True)
class CandidateSet:
    partitions: dict[int, Partition]
    k_max: int

    def __getitem__(self, k: int) -> Partition:
        return self.partitions[k]

    def __iter__(self):
        return iter(sorted(self.partitions))

    def ks(self) -> list[int]:
        return sorted(self.partitions)


def build_candidates(d, k_max: int | None = None, seed: int = 0, restarts: int = 1) -> CandidateSet:
    """k-medoids partitions for every k in 2..k_max (default ceil(n^(1/3)))."""
    n = np.asarray(d).shape[0]
    if k_max is None:
        k_max = default_k_max(n)
    if k_max < 2:
        raise InputError("k_max must be >= 2")
    parts = {}
    for k in range(2, k_max + 1):
        parts[k] = k_medoids(d, k, seed=seed ^ k, restarts=restarts)
        log.debug("k=%d cluster sizes %s", k, parts[k].sizes().tolist())
    return CandidateSet(parts, k_max)
