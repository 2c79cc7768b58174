"""Degree/weight factorization of the observation-graph Laplacian.

The graph over images carries a row-stochastic weight matrix W (relative
neighbor weights, zero diagonal) and a trace-1 diagonal degree matrix D.
Derived quantities - affinity A = D W, Laplacian L = D(I - W) and the
symmetrized Laplacian built from A + A^T - are recomputed on demand so the
factorization can never drift out of sync.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "WeightMatrix",
    "DegreeMatrix",
    "LaplaceFactors",
    "EventPartition",
    "build_laplacian",
    "symmetrized_laplacian",
    "segment_events",
]

_ROW_SUM_TOL = 1e-9


@dataclass
class WeightMatrix:
    """Nonnegative N x N matrix with unit row sums and zero diagonal."""

    values: np.ndarray

    def __post_init__(self):
        w = np.array(self.values, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError("weight matrix must be square")
        if not np.isfinite(w).all():
            raise ValueError("weights must be finite")
        if w.min() < -1e-12:
            raise ValueError("weights must be nonnegative")
        np.clip(w, 0.0, None, out=w)
        if np.abs(np.diag(w)).max() > 1e-12:
            raise ValueError("weight diagonal must be zero")
        np.fill_diagonal(w, 0.0)
        if np.abs(w.sum(axis=1) - 1.0).max() > _ROW_SUM_TOL:
            raise ValueError("weight rows must sum to 1")
        self.values = w

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass
class DegreeMatrix:
    """Diagonal out-degree values, nonnegative and summing to 1."""

    values: np.ndarray

    def __post_init__(self):
        d = np.array(self.values, dtype=float)
        if d.ndim != 1:
            raise ValueError("degree values must be a vector")
        if not np.isfinite(d).all():
            raise ValueError("degrees must be finite")
        if d.min() < -1e-12:
            raise ValueError("degrees must be nonnegative")
        np.clip(d, 0.0, None, out=d)
        if abs(d.sum() - 1.0) > _ROW_SUM_TOL:
            raise ValueError("degree trace must be 1")
        self.values = d

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @classmethod
    def uniform(cls, n: int) -> "DegreeMatrix":
        return cls(np.full(n, 1.0 / n))


@dataclass
class LaplaceFactors:
    """Degree and weight factors of the Laplacian L = D(I - W) = D - A."""

    degree: DegreeMatrix
    weight: WeightMatrix

    def __post_init__(self):
        if self.degree.n != self.weight.n:
            raise ValueError("degree and weight sizes disagree")

    @property
    def n(self) -> int:
        return self.degree.n

    def affinity(self) -> np.ndarray:
        """Affinity A = D W (not assumed symmetric)."""
        return self.degree.values[:, None] * self.weight.values

    def laplacian(self) -> np.ndarray:
        """Out-degree Laplacian D(I - W)."""
        return np.diag(self.degree.values) - self.affinity()

    def symmetrized_laplacian(self) -> np.ndarray:
        """Laplacian of A + A^T, combining out- and in-degree structure."""
        m = self.affinity()
        m = m + m.T
        return np.diag(m.sum(axis=1)) - m


def build_laplacian(factors: LaplaceFactors) -> np.ndarray:
    """Laplacian D(I - W); identical to diag(A 1) - A since A 1 = D 1."""
    return factors.laplacian()


def symmetrized_laplacian(factors: LaplaceFactors) -> np.ndarray:
    """Symmetric PSD Laplacian diag((A + A^T) 1) - (A + A^T)."""
    return factors.symmetrized_laplacian()


@dataclass
class EventPartition:
    """Connected-component labels over images, in order of first appearance."""

    component_id: np.ndarray
    component_count: int

    def members(self, component: int) -> np.ndarray:
        """Image indices of one component, in input order."""
        return np.flatnonzero(self.component_id == component)


def segment_events(factors: LaplaceFactors, affinity_threshold: float | None = None) -> EventPartition:
    """Split images into events: components of the thresholded affinity graph.

    An undirected edge joins i and j whenever (A + A^T)_ij exceeds the
    threshold. The default threshold is 1e-6 times the largest affinity, so
    couplings at solver-tolerance level do not glue events together.
    """
    sym = factors.affinity()
    sym = sym + sym.T
    if affinity_threshold is None:
        affinity_threshold = 1e-6 * float(factors.affinity().max())
    if affinity_threshold < 0:
        raise ValueError("affinity threshold must be nonnegative")
    adjacency = sym > affinity_threshold
    n = factors.n
    labels = np.full(n, -1, dtype=int)
    count = 0
    for seed in range(n):
        if labels[seed] >= 0:
            continue
        stack = [seed]
        labels[seed] = count
        while stack:
            node = stack.pop()
            for other in np.flatnonzero(adjacency[node]):
                if labels[other] < 0:
                    labels[other] = count
                    stack.append(other)
        count += 1
    return EventPartition(labels, count)
