"""Seeded k-means with k-means++ initialization and Lloyd refinement.

Deterministic for a given generator. Inertia is asserted non-increasing
across Lloyd iterations (with a tiny slack for float rounding).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centers: np.ndarray
    inertia_trace: list[float]


def _squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(n, k) squared euclidean distances, clipped at zero against rounding."""
    sq = (np.sum(points ** 2, axis=1)[:, None]
          - 2.0 * points @ centers.T
          + np.sum(centers ** 2, axis=1)[None, :])
    return np.maximum(sq, 0.0)


def plus_plus_init(points: np.ndarray, k: int,
                   rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: first center uniform, the rest D^2-weighted."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    min_sq = np.full(n, np.inf)
    for i in range(1, k):
        d = points - centers[i - 1]
        min_sq = np.minimum(min_sq, np.einsum("ij,ij->i", d, d))
        total = min_sq.sum()
        if total <= 0.0:
            # all remaining points coincide with chosen centers
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=min_sq / total))
        centers[i] = points[idx]
    return centers


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
           max_iter: int = 100, tol: float = 1e-6) -> KMeansResult:
    """Cluster (n, d) points into k groups.

    Ends when the largest centroid shift drops below `tol` or after
    `max_iter` Lloyd iterations. Clusters that empty out keep their previous
    centroid (they may repopulate; callers handle selection backfill).
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    centers = plus_plus_init(points, k, rng)
    trace: list[float] = []
    assignments = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        sq = _squared_distances(points, centers)
        assignments = np.argmin(sq, axis=1)
        inertia = float(sq[np.arange(n), assignments].sum())
        if trace:
            # exact math is monotone; allow only float rounding slack
            assert inertia <= trace[-1] + 1e-9 * max(1.0, abs(trace[-1])), \
                "k-means inertia increased across a Lloyd iteration"
        trace.append(inertia)
        new_centers = centers.copy()
        for c in range(k):
            members = points[assignments == c]
            if len(members):
                new_centers[c] = members.mean(axis=0)
        shift = float(np.max(np.linalg.norm(new_centers - centers, axis=1)))
        centers = new_centers
        if shift < tol:
            break
    sq = _squared_distances(points, centers)
    assignments = np.argmin(sq, axis=1)
    return KMeansResult(assignments=assignments, centers=centers,
                        inertia_trace=trace)
