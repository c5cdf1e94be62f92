from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidPartitionError


@dataclass(frozen=True)
class Partition:
    """Assignment of ``n`` indices to ``k`` clusters.

    ``medoids`` is empty for partitions that are not produced by k-medoids
    (e.g. the one-cluster-per-unit partition).
    """

    assignment: np.ndarray
    medoids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    k: int = 0

    def __post_init__(self):
        assignment = np.asarray(self.assignment, dtype=int)
        medoids = np.asarray(self.medoids, dtype=int)
        k = int(self.k) if self.k else (int(assignment.max()) + 1 if assignment.size else 0)
        object.__setattr__(self, "assignment", assignment)
        object.__setattr__(self, "medoids", medoids)
        object.__setattr__(self, "k", k)

    @property
    def n(self) -> int:
        return self.assignment.size

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k)

    def clusters(self) -> list[np.ndarray]:
        order = np.argsort(self.assignment, kind="stable")
        bounds = np.cumsum(self.sizes())[:-1]
        return np.split(order, bounds)

    def indicator(self) -> np.ndarray:
        """k x n 0/1 membership matrix."""
        out = np.zeros((self.k, self.n))
        out[self.assignment, np.arange(self.n)] = 1.0
        return out

    def check(self) -> None:
        if self.n == 0 or self.k < 1:
            raise InvalidPartitionError("partition is empty")
        if self.assignment.min() < 0 or self.assignment.max() >= self.k:
            raise InvalidPartitionError(f"labels must lie in 0..{self.k - 1}")
        empty = np.flatnonzero(self.sizes() == 0)
        if empty.size:
            raise InvalidPartitionError(f"empty cluster(s): {empty.tolist()}")
        if self.medoids.size:
            if self.medoids.size != self.k or np.unique(self.medoids).size != self.k:
                raise InvalidPartitionError("medoids must be k distinct indices")
            if not np.array_equal(self.assignment[self.medoids], np.arange(self.k)):
                raise InvalidPartitionError("medoid g must carry label g")

    @classmethod
    def from_labels(cls, labels) -> "Partition":
        """Partition from arbitrary hashable labels, numbered by first appearance."""
        labels = np.asarray(labels)
        _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
        rank = np.empty_like(first)
        rank[np.argsort(first, kind="stable")] = np.arange(first.size)
        return cls(assignment=rank[inverse], k=first.size)
