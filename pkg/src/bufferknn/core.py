"""Numeric core shared by every search engine.

Distances are squared Euclidean in single precision, accumulated
left-to-right over dimensions with a float32 accumulator.  Every engine
(and any chunked or batched decomposition of the same scan) therefore
produces bit-identical values for a given (query, reference) pair, which
is what makes results comparable across baselines, buffer counts, chunk
counts and device fleets.

Neighbor candidates are ordered by (squared distance, reference index).
That pair is packed into a single uint64 sort key, so ties resolve the
same way in every code path: plain comparisons, partitions and sorts all
agree on one total order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PointMatrix",
    "SearchParams",
    "NeighborList",
    "NeighborBatch",
    "as_point_matrix",
    "sq_euclidean",
    "sq_distances_to",
    "sq_distances_block",
    "pack_keys",
    "unpack_keys",
    "EMPTY_KEY",
    "INDEX_SENTINEL",
]

# Reference indices are stored in the low 32 bits of a sort key; this value
# marks an unused slot and must never be a legal index.
INDEX_SENTINEL = 0xFFFF_FFFF

_INF_BITS = np.float32(np.inf).view(np.uint32)

# Unused top-k slot: +inf distance and the largest possible index, so it
# sorts after every real candidate.
EMPTY_KEY = np.uint64((int(_INF_BITS) << 32) | INDEX_SENTINEL)


class PointMatrix:
    """A set of n points in d dimensions, row-major float32, n >= 1.

    Thin wrapper over a C-contiguous ndarray that pins the dtype/layout
    contract and rejects non-finite coordinates up front.
    """

    __slots__ = ("data",)

    def __init__(self, data) -> None:
        arr = np.ascontiguousarray(data, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"expected a 2-D array, got shape {arr.shape}")
        n, d = arr.shape
        if n < 1 or d < 1:
            raise ValueError(f"need at least one point and one dimension, got {n}x{d}")
        if n >= INDEX_SENTINEL:
            raise ValueError(f"point count {n} exceeds the supported maximum")
        if not np.all(np.isfinite(arr)):
            raise ValueError("points must be finite (no NaN or infinity)")
        self.data = arr

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return self.n

    def __repr__(self) -> str:
        return f"PointMatrix(n={self.n}, d={self.d})"


def as_point_matrix(obj) -> PointMatrix:
    """Coerce an array-like into a PointMatrix (no copy if already one)."""
    if isinstance(obj, PointMatrix):
        return obj
    return PointMatrix(obj)


@dataclass(frozen=True)
class SearchParams:
    """Parameters common to every k-NN engine."""

    k: int = 10

    def validate(self, n_refs: int) -> None:
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.k > n_refs:
            raise ValueError(f"k={self.k} exceeds the number of reference points ({n_refs})")


# -- distance kernels -------------------------------------------------------


def sq_euclidean(a, b) -> np.float32:
    """Squared Euclidean distance between two vectors.

    Fixed left-to-right accumulation in float32; the scalar reference for
    the vectorized kernels below.
    """
    av = np.asarray(a, dtype=np.float32)
    bv = np.asarray(b, dtype=np.float32)
    if av.ndim != 1 or av.shape != bv.shape:
        raise ValueError(f"expected equal-length 1-D vectors, got {av.shape} and {bv.shape}")
    acc = np.float32(0.0)
    for j in range(av.shape[0]):
        diff = av[j] - bv[j]
        acc = np.float32(acc + diff * diff)
    return acc


def sq_distances_to(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Squared distances from one query to each row of `points`.

    Accumulates dimension by dimension so each element sees exactly the
    same float32 operation sequence as sq_euclidean.
    """
    acc = np.zeros(points.shape[0], dtype=np.float32)
    for j in range(points.shape[1]):
        diff = points[:, j] - q[j]
        acc += diff * diff
    return acc


def sq_distances_block(queries: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Pairwise squared distances, queries (g,d) x points (L,d) -> (g,L)."""
    g = queries.shape[0]
    L = points.shape[0]
    acc = np.zeros((g, L), dtype=np.float32)
    for j in range(queries.shape[1]):
        diff = queries[:, j][:, None] - points[:, j][None, :]
        acc += diff * diff
    return acc


# -- packed candidate keys --------------------------------------------------


def pack_keys(sq_dists: np.ndarray, ref_indices: np.ndarray) -> np.ndarray:
    """Pack (sq_dist, ref_index) into uint64 keys preserving the tie order.

    Distances are non-negative float32, whose IEEE bit patterns sort like
    the values themselves when read as unsigned ints; the index occupies
    the low half so equal distances fall back to index order.
    """
    bits = np.ascontiguousarray(sq_dists, dtype=np.float32).view(np.uint32)
    return (bits.astype(np.uint64) << np.uint64(32)) | np.asarray(ref_indices).astype(np.uint64)


def unpack_keys(keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of pack_keys: keys -> (sq_dists float32, ref_indices int64)."""
    dists = (keys >> np.uint64(32)).astype(np.uint32).view(np.float32)
    idx = (keys & np.uint64(0xFFFF_FFFF)).astype(np.int64)
    return dists, idx


def _topk_keys(keys: np.ndarray, k: int) -> np.ndarray:
    """k smallest keys per row, ascending; keys is (g, L)."""
    if keys.shape[1] <= k:
        out = np.full((keys.shape[0], k), EMPTY_KEY, dtype=np.uint64)
        out[:, : keys.shape[1]] = np.sort(keys, axis=1)
        return out
    part = np.partition(keys, k - 1, axis=1)[:, :k]
    part.sort(axis=1)
    return part


# -- per-query candidate lists ----------------------------------------------


@dataclass
class NeighborList:
    """Up to k (ref_index, sq_dist) pairs, kept sorted by (sq_dist, ref_index)."""

    k: int
    entries: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")

    def insert(self, ref_index: int, sq_dist: float) -> None:
        """Insert a candidate, keeping the k smallest under the tie order.

        A candidate sorting at or past a full list's tail is dropped; on
        ties the smaller reference index wins.
        """
        key = (float(sq_dist), int(ref_index))
        lo, hi = 0, len(self.entries)
        while lo < hi:
            mid = (lo + hi) // 2
            e = self.entries[mid]
            if (e[1], e[0]) <= key:
                lo = mid + 1
            else:
                hi = mid
        if lo >= self.k:
            return
        self.entries.insert(lo, (int(ref_index), float(sq_dist)))
        if len(self.entries) > self.k:
            self.entries.pop()

    @property
    def full(self) -> bool:
        return len(self.entries) >= self.k

    def kth_sq_dist(self) -> float:
        """Current k-th smallest distance, +inf while the list is short."""
        if not self.full:
            return float("inf")
        return self.entries[self.k - 1][1]

    def indices(self) -> list[int]:
        return [i for i, _ in self.entries]


class NeighborBatch:
    """Top-k lists for a batch of m queries, stored as packed keys.

    Row r holds the k smallest keys seen by query r, ascending; unused
    slots hold EMPTY_KEY.  All engines return this type, so equality of
    results is plain array equality.
    """

    __slots__ = ("k", "keys", "counts")

    def __init__(self, m: int, k: int) -> None:
        if k < 1:
            raise ValueError("k must be >= 1")
        self.k = k
        self.keys = np.full((m, k), EMPTY_KEY, dtype=np.uint64)
        self.counts = np.zeros(m, dtype=np.int64)

    @property
    def m(self) -> int:
        return self.keys.shape[0]

    def update_rows(self, rows: np.ndarray, cand_keys: np.ndarray) -> None:
        """Merge candidate keys (len(rows), L) into the selected rows."""
        L = cand_keys.shape[1]
        if L == 0:
            return
        if L > 4 * self.k:
            cand_keys = _topk_keys(cand_keys, self.k)
            L = self.k
        merged = np.concatenate([self.keys[rows], cand_keys], axis=1)
        merged.sort(axis=1)
        self.keys[rows] = merged[:, : self.k]
        self.counts[rows] = np.minimum(self.counts[rows] + L, self.k)

    def set_rows(self, rows: np.ndarray, topk_keys: np.ndarray, seen: int) -> None:
        """Overwrite rows with already-selected ascending top-k keys."""
        self.keys[rows] = topk_keys
        self.counts[rows] = min(seen, self.k)

    def kth_sq_dists(self) -> np.ndarray:
        """Per-row k-th smallest distance; +inf where fewer than k seen."""
        return (self.keys[:, self.k - 1] >> np.uint64(32)).astype(np.uint32).view(np.float32)

    @property
    def sq_dists(self) -> np.ndarray:
        return unpack_keys(self.keys)[0]

    @property
    def indices(self) -> np.ndarray:
        return unpack_keys(self.keys)[1]

    def as_lists(self) -> list[NeighborList]:
        dists, idx = unpack_keys(self.keys)
        out = []
        for r in range(self.keys.shape[0]):
            c = int(self.counts[r])
            nl = NeighborList(self.k)
            nl.entries = [(int(idx[r, j]), float(dists[r, j])) for j in range(c)]
            out.append(nl)
        return out
