"""Classic pointer-based k-d tree baseline.

Splitting walks dimensions cyclically (depth mod d) and cuts each subset
at the positional median under the order (coordinate, point index), so
construction is fully deterministic even with duplicate coordinates.
The same convention (exported as `median_split`) is reused by the
buffered tree, which is what makes the two traversals comparable
leaf-for-leaf.

`query_kdtree` is the reference definition of per-query traversal order:
descend to the query's leaf, then unwind, visiting each far subtree
whose slab distance does not exceed the current k-th smallest squared
distance (ties are visited, never pruned).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import (
    EMPTY_KEY,
    NeighborBatch,
    NeighborList,
    SearchParams,
    as_point_matrix,
    pack_keys,
    unpack_keys,
    sq_distances_to,
)

__all__ = [
    "KdTree",
    "KdQueryResult",
    "median_split",
    "build_kdtree",
    "query_kdtree",
    "query_kdtree_parallel",
]

_SIGN_BIT = np.uint32(0x8000_0000)


def _float_order_bits(values: np.ndarray) -> np.ndarray:
    """Map float32 to uint32 preserving order for all finite values."""
    bits = np.ascontiguousarray(values, dtype=np.float32).view(np.uint32)
    neg = (bits & _SIGN_BIT) != 0
    out = bits ^ _SIGN_BIT
    out[neg] = ~bits[neg]
    return out


def median_split(data: np.ndarray, idx: np.ndarray, dim: int) -> tuple[np.float32, np.ndarray, np.ndarray]:
    """Split point indices at the positional median of one coordinate.

    Orders the subset by (coordinate, point index), takes the value at
    position floor(s/2) as the split value, and returns (split_value,
    left_indices, right_indices) with the median point itself going
    right.  Uses an introselect partition on packed keys, so the split is
    expected linear time and exact under the tie order.
    """
    s = idx.shape[0]
    mid = s // 2
    keys = (_float_order_bits(data[idx, dim]).astype(np.uint64) << np.uint64(32)) \
        | idx.astype(np.uint64)
    part = np.argpartition(keys, mid)
    split_value = data[idx[part[mid]], dim]
    return split_value, idx[part[:mid]], idx[part[mid:]]


@dataclass
class _Node:
    split_dim: int
    split_value: np.float32
    left: "_Node | int"
    right: "_Node | int"


@dataclass
class KdTree:
    """Built tree: nodes plus the leaf-contiguous rearranged point copy."""

    root: "_Node | int"
    points: np.ndarray           # (n, d) float32, leaf-contiguous
    original_index: np.ndarray   # (n,) int64, rearranged position -> input row
    leaf_bounds: np.ndarray      # (n_leaves, 2) int64 ranges into points
    leaf_size: int
    height: int | None = None

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def n_leaves(self) -> int:
        return self.leaf_bounds.shape[0]


def build_kdtree(refs, leaf_size: int = 32, height: int | None = None) -> KdTree:
    """Build the tree over a reference set.

    Recursion stops when a subset has at most `leaf_size` points; if
    `height` is given it overrides that rule and every branch splits to
    exactly that depth instead (requires 2**height <= n), yielding a
    complete tree whose shape matches the buffered top tree over the
    same data.
    """
    refs = as_point_matrix(refs)
    data = refs.data
    if height is None:
        if leaf_size < 1:
            raise ValueError(f"leaf_size must be >= 1, got {leaf_size}")
    else:
        if height < 1:
            raise ValueError(f"height must be >= 1, got {height}")
        if 2 ** height > refs.n:
            raise ValueError(f"height {height} needs at least {2 ** height} points, have {refs.n}")

    perm: list[np.ndarray] = []
    bounds: list[tuple[int, int]] = []

    def rec(idx: np.ndarray, depth: int) -> _Node | int:
        stop = (depth == height) if height is not None else (idx.shape[0] <= leaf_size)
        if stop:
            start = sum(b.shape[0] for b in perm)
            perm.append(idx)
            bounds.append((start, start + idx.shape[0]))
            return len(bounds) - 1
        dim = depth % refs.d
        sv, left_idx, right_idx = median_split(data, idx, dim)
        return _Node(dim, sv, rec(left_idx, depth + 1), rec(right_idx, depth + 1))

    root = rec(np.arange(refs.n, dtype=np.int64), 0)
    order = np.concatenate(perm)
    return KdTree(
        root=root,
        points=np.ascontiguousarray(data[order]),
        original_index=order,
        leaf_bounds=np.asarray(bounds, dtype=np.int64),
        leaf_size=leaf_size,
        height=height,
    )


@dataclass
class KdQueryResult:
    neighbors: NeighborList
    visited_leaves: list[int] = field(default_factory=list)


def query_kdtree(tree: KdTree, q, params: SearchParams, prune: bool = True) -> KdQueryResult:
    """Search one query point; returns neighbors and the ordered list of
    leaves whose points were scanned.

    With prune=False every leaf is visited (exhaustive traversal in the
    same order), which is only useful for checking the pruning rule.
    """
    qv = np.ascontiguousarray(q, dtype=np.float32)
    if qv.ndim != 1 or qv.shape[0] != tree.d:
        raise ValueError(f"query must be a length-{tree.d} vector, got shape {qv.shape}")
    params.validate(tree.n)
    k = params.k

    keys = np.full(k, EMPTY_KEY, dtype=np.uint64)
    seen = 0
    visited: list[int] = []

    def kth() -> np.float32:
        return (keys[k - 1] >> np.uint64(32)).astype(np.uint32).view(np.float32)  # type: ignore[union-attr]

    def visit(node: _Node | int) -> None:
        nonlocal keys, seen
        if isinstance(node, int):
            lo, hi = tree.leaf_bounds[node]
            dists = sq_distances_to(tree.points[lo:hi], qv)
            cand = pack_keys(dists, tree.original_index[lo:hi].astype(np.uint64))
            merged = np.concatenate([keys, cand])
            merged.sort()
            keys = merged[:k]
            seen += hi - lo
            visited.append(int(node))
            return
        sd, sv = node.split_dim, node.split_value
        if qv[sd] < sv:
            near, far = node.left, node.right
        else:
            near, far = node.right, node.left
        visit(near)
        hp = np.float32(qv[sd] - sv)
        if not prune or not hp * hp > kth():
            visit(far)

    visit(tree.root)

    dists, idx = unpack_keys(keys)
    nl = NeighborList(k)
    nl.entries = [(int(idx[j]), float(dists[j])) for j in range(min(seen, k))]
    return KdQueryResult(neighbors=nl, visited_leaves=visited)


def query_kdtree_parallel(tree: KdTree, queries, params: SearchParams,
                          threads: int = 1) -> NeighborBatch:
    """Search a batch of queries, one task per query, `threads` threads.

    Thread count affects scheduling only; results are identical to the
    sequential loop.
    """
    qarr = np.ascontiguousarray(queries.data if hasattr(queries, "data") else queries,
                                dtype=np.float32)
    if qarr.ndim != 2 or qarr.shape[1] != tree.d:
        raise ValueError(f"queries must be (m, {tree.d}), got {qarr.shape}")
    params.validate(tree.n)
    if threads < 1:
        raise ValueError("threads must be >= 1")
    m = qarr.shape[0]
    out = NeighborBatch(m, params.k)
    if m == 0:
        return out

    def one(i: int) -> None:
        res = query_kdtree(tree, qarr[i], params)
        nl = res.neighbors
        row = np.array([i])
        if nl.entries:
            ridx = np.array([e[0] for e in nl.entries], dtype=np.uint64)
            rd = np.array([e[1] for e in nl.entries], dtype=np.float32)
            out.update_rows(row, pack_keys(rd, ridx)[None, :])

    if threads == 1:
        for i in range(m):
            one(i)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(one, range(m), chunksize=64))
    return out
