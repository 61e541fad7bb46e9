"""Distance-based outlier scoring over a self-query.

Each point queries the set it belongs to for k+1 neighbours, its own
zero-distance match is removed, and the score is the mean euclidean
distance to the k survivors.  Large scores mark isolated points.
"""

from __future__ import annotations

import numpy as np

from .core import NeighborBatch, PointMatrix, SearchParams

__all__ = [
    "exclude_self_matches",
    "outlier_scores",
    "rank_outliers",
    "self_excluded_knn",
]


def exclude_self_matches(indices: np.ndarray, sq_dists: np.ndarray
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Drop one column per row from a (n, k+1) self-query result.

    Row i loses the column whose index equals i when present, otherwise
    its last column; either way k neighbours remain.  A point always ties
    itself at distance zero, so when the self index is absent it was
    displaced by ties and the dropped tail entry is interchangeable.
    """
    n, kp1 = indices.shape
    if kp1 < 2:
        raise ValueError("need at least 2 columns to drop the self match")
    is_self = indices == np.arange(n, dtype=indices.dtype)[:, None]
    drop = np.where(is_self.any(axis=1), is_self.argmax(axis=1), kp1 - 1)
    keep = np.ones((n, kp1), dtype=bool)
    keep[np.arange(n), drop] = False
    return indices[keep].reshape(n, kp1 - 1), sq_dists[keep].reshape(n, kp1 - 1)


def outlier_scores(sq_dists: np.ndarray) -> np.ndarray:
    """Mean euclidean neighbour distance per row, in float64."""
    return np.sqrt(sq_dists.astype(np.float64)).mean(axis=1)


def rank_outliers(scores: np.ndarray) -> np.ndarray:
    """Point indices from most to least outlying; score ties break toward
    the larger point index so the order is a strict descending
    lexicographic sort of (score, index) pairs."""
    n = scores.shape[0]
    return np.lexsort((np.arange(n), scores))[::-1]


def self_excluded_knn(points: PointMatrix, k: int, engine) -> tuple[np.ndarray, np.ndarray]:
    """k nearest neighbours of every point within its own set.

    `engine(refs, queries, params)` must return a NeighborBatch; it is
    asked for k+1 neighbours and the self matches are stripped.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if k + 1 > points.n:
        raise ValueError(f"k={k} needs at least {k + 1} points, have {points.n}")
    res: NeighborBatch = engine(points, points.data, SearchParams(k=k + 1))
    return exclude_self_matches(res.indices, res.sq_dists)
