"""Buffered k-d tree: lazily batched k-NN over a chunked leaf structure.

The tree has two parts.  A pointer-less *top tree* of a fixed height h
stores only split values for the 2**h - 1 internal nodes (node j's
children are 2j+1 and 2j+2).  The *leaf structure* is a copy of the
reference points permuted so that each of the 2**h leaves owns one
contiguous range; it is the only large array and the only thing that
ever moves to the device.

Instead of scanning a leaf the moment a query reaches it, the search
parks the query index in a per-leaf buffer.  Once any buffer passes the
half-full threshold (or the queues run dry), all buffered work is
processed in one batch: the leaf structure streams through the device
chunk by chunk while each leaf's queries are scanned against the slices
of that leaf present in the current chunk.  Processed queries re-enter a
reinsert queue and continue their own traversal exactly where a
sequential search would: buffering delays a query's leaf visits but
never reorders them, so results are bit-identical to the classic tree
and to brute force.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .core import NeighborBatch, NeighborList, SearchParams, as_point_matrix
from .kdtree import median_split

__all__ = [
    "DONE",
    "BufferConfig",
    "TopTree",
    "LeafStructure",
    "BufferKdTree",
    "BufferOverflowError",
    "QueryBuffers",
    "QueryState",
    "QueryStateBatch",
    "SearchStats",
    "build_buffer_tree",
    "validate_structure",
    "find_leaf_batch",
    "process_all_buffers",
    "lazy_search",
]

DONE = -1  # find_leaf_batch result for a query whose traversal is finished


class BufferOverflowError(RuntimeError):
    """Raised when an insert would exceed a leaf buffer's capacity.

    The search loop never lets this happen (it spills instead), so seeing
    it means a scheduling bug, not a data problem.
    """


@dataclass(frozen=True)
class BufferConfig:
    """Buffering knobs for the lazy search.

    buffer_capacity is the per-leaf buffer size, fetch_count how many
    query indices are pulled from the queues per iteration, and
    half_full_threshold the fill level that triggers buffer processing.
    """

    buffer_capacity: int
    fetch_count: int
    half_full_threshold: int

    def __post_init__(self) -> None:
        if self.buffer_capacity < 1:
            raise ValueError("buffer_capacity must be >= 1")
        if self.fetch_count < 1:
            raise ValueError("fetch_count must be >= 1")
        if not 1 <= self.half_full_threshold <= self.buffer_capacity:
            raise ValueError("half_full_threshold must be in [1, buffer_capacity]")

    @classmethod
    def for_height(cls, height: int, buffer_capacity: int | None = None,
                   fetch_multiple: int = 10,
                   half_full_threshold: int | None = None) -> "BufferConfig":
        """Defaults tied to the tree height: capacity 2**(24 - height)
        (so total buffer slots stay constant as the tree grows) and a
        fetch count of `fetch_multiple` times the capacity."""
        cap = buffer_capacity if buffer_capacity is not None else 2 ** max(0, 24 - height)
        thr = half_full_threshold if half_full_threshold is not None else max(1, cap // 2)
        return cls(buffer_capacity=cap, fetch_count=fetch_multiple * cap,
                   half_full_threshold=thr)


@dataclass(frozen=True)
class TopTree:
    """Pointer-less complete binary tree of split values."""

    height: int
    d: int
    split_values: np.ndarray  # (2**height - 1,) float32, level order
    levels: np.ndarray        # (2**height - 1,) int32, depth of each node

    @property
    def n_internal(self) -> int:
        return self.split_values.shape[0]

    @property
    def n_leaves(self) -> int:
        return self.n_internal + 1


@dataclass(frozen=True)
class LeafStructure:
    """Leaf-contiguous copy of the reference points.

    `points` may be an ordinary array or a read-only memory map when the
    tree was built file-backed; either way rows [leaf_starts[i],
    leaf_starts[i+1]) belong to leaf i and `original_index` maps each row
    back to the input point it came from.
    """

    points: np.ndarray
    original_index: np.ndarray
    leaf_starts: np.ndarray  # (n_leaves + 1,) int64

    def bounds(self, leaf: int) -> tuple[int, int]:
        return int(self.leaf_starts[leaf]), int(self.leaf_starts[leaf + 1])


@dataclass(frozen=True)
class BufferKdTree:
    top: TopTree
    leaves: LeafStructure

    @property
    def n(self) -> int:
        return self.leaves.points.shape[0]

    @property
    def d(self) -> int:
        return self.leaves.points.shape[1]

    @property
    def n_leaves(self) -> int:
        return self.top.n_leaves


def build_buffer_tree(refs, height: int, store_path: str | None = None) -> BufferKdTree:
    """Build top tree and leaf structure over a reference set.

    Splits use the shared positional-median convention (see
    kdtree.median_split) level by level, so with n = 2**height * c the
    leaves all hold c points and in general sizes differ by at most one.
    With `store_path` the rearranged points are written to that .npy file
    and memory-mapped read-only instead of held in RAM.
    """
    refs = as_point_matrix(refs)
    if height < 1:
        raise ValueError(f"height must be >= 1, got {height}")
    if 2 ** height > refs.n:
        raise ValueError(
            f"height {height} needs at least {2 ** height} points, have {refs.n}")
    data = refs.data

    levels = np.empty(2 ** height - 1, dtype=np.int32)
    for lvl in range(height):
        levels[2 ** lvl - 1: 2 ** (lvl + 1) - 1] = lvl

    subsets: list[np.ndarray] = [np.arange(refs.n, dtype=np.int64)]
    split_values: list[np.float32] = []
    for depth in range(height):
        dim = depth % refs.d
        nxt: list[np.ndarray] = []
        for sub in subsets:
            sv, left, right = median_split(data, sub, dim)
            split_values.append(sv)
            nxt.append(left)
            nxt.append(right)
        subsets = nxt

    order = np.concatenate(subsets)
    sizes = np.array([s.shape[0] for s in subsets], dtype=np.int64)
    starts = np.zeros(sizes.shape[0] + 1, dtype=np.int64)
    np.cumsum(sizes, out=starts[1:])

    points = np.ascontiguousarray(data[order])
    if store_path is not None:
        np.save(store_path, points)
        path = store_path if store_path.endswith(".npy") else store_path + ".npy"
        points = np.load(path, mmap_mode="r")

    top = TopTree(height=height, d=refs.d,
                  split_values=np.asarray(split_values, dtype=np.float32),
                  levels=levels)
    return BufferKdTree(top=top, leaves=LeafStructure(
        points=points, original_index=order, leaf_starts=starts))


def validate_structure(tree: BufferKdTree, refs=None) -> None:
    """Structural audit; raises ValueError on any violated invariant.

    Checks that leaf ranges partition the points with sizes differing by
    at most one, that original_index is a permutation, that every split
    separates its descendant leaves correctly, and (given `refs`) that
    the rearranged rows are bit-identical to the originals.
    """
    top, leaves = tree.top, tree.leaves
    starts = leaves.leaf_starts
    n = tree.n
    if starts[0] != 0 or starts[-1] != n or np.any(np.diff(starts) < 1):
        raise ValueError("leaf ranges do not partition the point set")
    sizes = np.diff(starts)
    if sizes.max() - sizes.min() > 1:
        raise ValueError(f"leaf sizes differ by more than one: {sizes.min()}..{sizes.max()}")
    perm = np.sort(leaves.original_index)
    if not np.array_equal(perm, np.arange(n)):
        raise ValueError("original_index is not a permutation")
    if refs is not None:
        refs = as_point_matrix(refs)
        if not np.array_equal(np.asarray(leaves.points), refs.data[leaves.original_index]):
            raise ValueError("rearranged points do not match the input rows")

    pts = np.asarray(leaves.points)

    def rec(node: int, leaf_lo: int, leaf_hi: int) -> None:
        if node >= top.n_internal:
            return
        mid = (leaf_lo + leaf_hi) // 2
        dim = int(top.levels[node]) % tree.d
        sv = top.split_values[node]
        left = pts[starts[leaf_lo]: starts[mid], dim]
        right = pts[starts[mid]: starts[leaf_hi], dim]
        if left.size and left.max() > sv:
            raise ValueError(f"node {node}: left subtree exceeds split value")
        if right.size == 0 or right.min() != sv:
            raise ValueError(f"node {node}: right subtree does not start at the split value")
        rec(2 * node + 1, leaf_lo, mid)
        rec(2 * node + 2, mid, leaf_hi)

    rec(0, 0, tree.n_leaves)


# -- per-query traversal state ----------------------------------------------


@dataclass
class QueryState:
    """Read-only snapshot of one query's traversal (for inspection)."""

    index: int
    started: bool
    done: bool
    stack: list[tuple[int, int]]  # (parent node, pending far child), bottom to top
    neighbors: NeighborList


class QueryStateBatch:
    """Traversal state for m queries: explicit far-child stacks plus the
    shared neighbor lists.  All arrays are indexed by query row."""

    def __init__(self, queries: np.ndarray, k: int, height: int,
                 record_sequences: bool = False) -> None:
        q = np.ascontiguousarray(queries, dtype=np.float32)
        if q.ndim != 2:
            raise ValueError("queries must be a 2-D array")
        m = q.shape[0]
        self.queries = q
        self.neighbors = NeighborBatch(m, k)
        self.stack = np.zeros((m, max(1, height)), dtype=np.int64)
        self.depth = np.zeros(m, dtype=np.int64)
        self.started = np.zeros(m, dtype=bool)
        self.done = np.zeros(m, dtype=bool)
        self.leaves_visited = np.zeros(m, dtype=np.int64)
        self.leaf_sequences: list[list[int]] | None = \
            [[] for _ in range(m)] if record_sequences else None

    @property
    def m(self) -> int:
        return self.queries.shape[0]

    def state_view(self, i: int) -> QueryState:
        far = self.stack[i, : self.depth[i]]
        lists = [(int((f - 1) >> 1), int(f)) for f in far]
        nl = NeighborList(self.neighbors.k)
        row = self.neighbors.as_lists()[i]
        nl.entries = row.entries
        return QueryState(index=i, started=bool(self.started[i]),
                          done=bool(self.done[i]), stack=lists, neighbors=nl)


def find_leaf_batch(tree: BufferKdTree, states: QueryStateBatch,
                    indices) -> np.ndarray:
    """Advance each listed query to the next leaf it must scan.

    Returns one entry per index: a leaf id, or DONE when the traversal is
    over (every remaining stack entry pruned, or the stack was empty).
    Fresh queries descend from the root; resumed ones pop their deepest
    pending far child, skip it while the slab distance exceeds the
    query's current k-th smallest squared distance (ties are kept), and
    descend into the first survivor.  Indices must be distinct and must
    not include queries that are already done or sitting in a buffer.
    """
    idxs = np.ascontiguousarray(indices, dtype=np.int64)
    nb = idxs.shape[0]
    res = np.full(nb, DONE, dtype=np.int64)
    if nb == 0:
        return res

    top = tree.top
    d = top.d
    n_internal = top.n_internal
    split = top.split_values
    levels = top.levels
    q = states.queries
    kth = states.neighbors.kth_sq_dists()

    fresh = ~states.started[idxs]
    states.started[idxs] = True
    # node >= 0: currently descending at that node; -1: pop the stack next
    node = np.where(fresh, 0, -1)
    unresolved = np.ones(nb, dtype=bool)

    while True:
        act = np.flatnonzero(unresolved)
        if act.size == 0:
            break
        nd = node[act]

        popping = act[nd < 0]
        if popping.size:
            pq = idxs[popping]
            empty = states.depth[pq] == 0
            done_pos = popping[empty]
            if done_pos.size:
                states.done[idxs[done_pos]] = True
                unresolved[done_pos] = False  # res already DONE
            live_pos = popping[~empty]
            if live_pos.size:
                lq = idxs[live_pos]
                newdep = states.depth[lq] - 1
                far = states.stack[lq, newdep]
                states.depth[lq] = newdep
                parent = (far - 1) >> 1
                sd = levels[parent] % d
                hp = q[lq, sd] - split[parent]
                keep = ~((hp * hp) > kth[lq])
                node[live_pos[keep]] = far[keep]
                # pruned entries leave node at -1: pop again next pass

        desc = act[nd >= 0]
        if desc.size:
            v = node[desc]
            at_leaf = v >= n_internal
            leaf_pos = desc[at_leaf]
            if leaf_pos.size:
                leaf_ids = v[at_leaf] - n_internal
                res[leaf_pos] = leaf_ids
                unresolved[leaf_pos] = False
                lq = idxs[leaf_pos]
                states.leaves_visited[lq] += 1
                if states.leaf_sequences is not None:
                    for qq, lf in zip(lq.tolist(), leaf_ids.tolist()):
                        states.leaf_sequences[qq].append(lf)
            int_pos = desc[~at_leaf]
            if int_pos.size:
                iv = v[~at_leaf]
                iq = idxs[int_pos]
                sd = levels[iv] % d
                go_left = q[iq, sd] < split[iv]
                near = 2 * iv + 1 + np.where(go_left, 0, 1)
                farc = 2 * iv + 1 + np.where(go_left, 1, 0)
                dep = states.depth[iq]
                states.stack[iq, dep] = farc
                states.depth[iq] = dep + 1
                node[int_pos] = near

    return res


# -- per-leaf query buffers --------------------------------------------------


class QueryBuffers:
    """Fixed-capacity query-index buffers, one per leaf."""

    def __init__(self, n_leaves: int, capacity: int) -> None:
        if n_leaves < 1 or capacity < 1:
            raise ValueError("n_leaves and capacity must be >= 1")
        self.capacity = capacity
        self.fills = np.zeros(n_leaves, dtype=np.int64)
        self.total = 0
        self._parts: list[list[np.ndarray]] = [[] for _ in range(n_leaves)]

    @property
    def n_leaves(self) -> int:
        return self.fills.shape[0]

    def space(self, leaf: int) -> int:
        return self.capacity - int(self.fills[leaf])

    def max_fill(self) -> int:
        return int(self.fills.max())

    def insert(self, leaf: int, query_index: int) -> None:
        """Append one query index to a leaf's buffer; overflow is a bug."""
        self.insert_many(leaf, np.array([query_index], dtype=np.int64))

    def insert_many(self, leaf: int, rows: np.ndarray) -> None:
        if rows.shape[0] > self.space(leaf):
            raise BufferOverflowError(
                f"leaf {leaf}: inserting {rows.shape[0]} into a buffer holding "
                f"{int(self.fills[leaf])}/{self.capacity}")
        if rows.shape[0] == 0:
            return
        self._parts[leaf].append(rows)
        self.fills[leaf] += rows.shape[0]
        self.total += rows.shape[0]

    def drain_all(self) -> list[tuple[int, np.ndarray]]:
        """Empty every buffer; returns (leaf, query rows) in leaf order."""
        out = []
        for leaf in np.flatnonzero(self.fills):
            parts = self._parts[leaf]
            rows = parts[0] if len(parts) == 1 else np.concatenate(parts)
            out.append((int(leaf), rows))
            self._parts[leaf] = []
        self.fills[:] = 0
        self.total = 0
        return out


# -- batch processing and the search loop ------------------------------------


@dataclass
class SearchStats:
    """Optional instrumentation for lazy_search."""

    record_sequences: bool = False
    iterations: int = 0
    process_rounds: int = 0
    leaf_scan_events: int = 0
    spilled: int = 0
    find_leaf_seconds: float = 0.0
    buffer_seconds: float = 0.0
    visited_per_query: np.ndarray | None = None
    leaf_sequences: list[list[int]] | None = None


def process_all_buffers(tree: BufferKdTree, buffers: QueryBuffers,
                        states: QueryStateBatch, pipeline,
                        debug: bool = False) -> np.ndarray:
    """Drain every buffer, scan the buffered work, return queries to reinsert.

    Each buffered query is scanned against its whole leaf.  The leaf
    structure streams through the device chunk by chunk: a leaf range
    crossing chunk boundaries contributes one clipped sub-range per
    chunk, and the clipped pieces jointly cover the leaf exactly once.
    Queries whose traversal stack is empty after the scan are finished;
    the rest are handed back for the reinsert queue.  At least one buffer
    should be non-empty; with debug=True an all-empty call raises.
    """
    drained = buffers.drain_all()
    if not drained:
        if debug:
            raise ValueError("process_all_buffers called with every buffer empty")
        return np.empty(0, dtype=np.int64)

    plan = pipeline.plan
    starts = tree.leaves.leaf_starts
    groups: list[list[tuple[np.ndarray, int, int]]] = [[] for _ in range(plan.num_chunks)]
    for leaf, rows in drained:
        lo, hi = int(starts[leaf]), int(starts[leaf + 1])
        j0, j1 = plan.overlapping(lo, hi)
        for j in range(j0, j1):
            clo, chi = plan.range(j)
            groups[j].append((rows, max(lo, clo), min(hi, chi)))

    pipeline.run_round(groups, states.queries, states.neighbors)

    all_rows = np.concatenate([rows for _, rows in drained])
    finished = states.depth[all_rows] == 0
    states.done[all_rows[finished]] = True
    return all_rows[~finished]


class _IndexFifo:
    """FIFO of query indices stored as a deque of array segments."""

    def __init__(self) -> None:
        self._segs: list[np.ndarray] = []
        self._head = 0
        self.total = 0

    def push(self, arr: np.ndarray) -> None:
        if arr.shape[0]:
            self._segs.append(arr)
            self.total += arr.shape[0]

    def pop(self, nmax: int) -> np.ndarray:
        take: list[np.ndarray] = []
        need = min(nmax, self.total)
        while need > 0:
            seg = self._segs[0]
            avail = seg.shape[0] - self._head
            if avail <= need:
                take.append(seg[self._head:])
                self._segs.pop(0)
                self._head = 0
                need -= avail
                self.total -= avail
            else:
                take.append(seg[self._head: self._head + need])
                self._head += need
                self.total -= need
                need = 0
        if not take:
            return np.empty(0, dtype=np.int64)
        return take[0] if len(take) == 1 else np.concatenate(take)


def lazy_search(tree: BufferKdTree, queries, params: SearchParams,
                config: BufferConfig | None = None, device=None, plan=None, *,
                stats: SearchStats | None = None,
                debug_audit: bool = False) -> NeighborBatch:
    """Batched k-NN over the buffered tree; bit-identical to brute force.

    Pulls up to fetch_count query indices per iteration (reinserted
    queries before fresh input), advances each to its next leaf, and
    parks it in that leaf's buffer.  When any buffer reaches the
    half-full threshold, or the queues are empty while work is buffered,
    every buffer is processed in one chunked device pass.  A query whose
    target buffer is full is held in a spill list and retried the next
    iteration, which can never deadlock because a full buffer also fires
    the processing trigger.  Without an explicit device/plan a private
    single-chunk device sized to the tree is created for the call.
    """
    from .device import ChunkPipeline

    qarr = np.ascontiguousarray(queries.data if hasattr(queries, "data") else queries,
                                dtype=np.float32)
    if qarr.ndim != 2 or qarr.shape[1] != tree.d:
        raise ValueError(f"queries must be (m, {tree.d}), got {qarr.shape}")
    params.validate(tree.n)
    m = qarr.shape[0]
    if m == 0:
        return NeighborBatch(0, params.k)

    if config is None:
        config = BufferConfig.for_height(tree.top.height)
    own_device = device is None
    if plan is None:
        from .scheduler import ChunkPlan
        plan = ChunkPlan.build(tree.n, 1)
    if device is None:
        from .device import DeviceSpec, chunk_required, device_init
        chunk_bytes = chunk_required(plan.max_len, tree.d)
        qblock = m * (4 * tree.d + 8 * params.k + 32)
        device = device_init(DeviceSpec(memory_capacity=2 * chunk_bytes + qblock),
                             chunk_bytes, qblock)

    record = stats.record_sequences if stats is not None else False
    states = QueryStateBatch(qarr, params.k, tree.top.height, record_sequences=record)
    buffers = QueryBuffers(tree.n_leaves, config.buffer_capacity)
    pipeline = ChunkPipeline(device, np.asarray(tree.leaves.points),
                             tree.leaves.original_index, plan)
    input_pos = 0
    reinsert = _IndexFifo()
    spill: list[tuple[int, np.ndarray]] = []

    try:
        while input_pos < m or reinsert.total or spill or buffers.total:
            if stats is not None:
                stats.iterations += 1
            t0 = time.perf_counter()

            if spill:
                still: list[tuple[int, np.ndarray]] = []
                for leaf, rows in spill:
                    take = min(buffers.space(leaf), rows.shape[0])
                    buffers.insert_many(leaf, rows[:take])
                    if take < rows.shape[0]:
                        still.append((leaf, rows[take:]))
                spill = still

            want = config.fetch_count
            batch = reinsert.pop(want)
            if batch.shape[0] < want and input_pos < m:
                take = min(want - batch.shape[0], m - input_pos)
                fresh = np.arange(input_pos, input_pos + take, dtype=np.int64)
                input_pos += take
                batch = fresh if batch.shape[0] == 0 else np.concatenate([batch, fresh])
            if stats is not None:
                stats.buffer_seconds += time.perf_counter() - t0

            if batch.shape[0]:
                t1 = time.perf_counter()
                res = find_leaf_batch(tree, states, batch)
                if stats is not None:
                    stats.find_leaf_seconds += time.perf_counter() - t1
                t2 = time.perf_counter()
                live = res >= 0
                lrows = batch[live]
                lres = res[live]
                order = np.argsort(lres, kind="stable")
                lrows = lrows[order]
                lres = lres[order]
                leaf_ids, first = np.unique(lres, return_index=True)
                cuts = np.append(first, lres.shape[0])
                for g in range(leaf_ids.shape[0]):
                    leaf = int(leaf_ids[g])
                    rows = lrows[cuts[g]: cuts[g + 1]]
                    take = min(buffers.space(leaf), rows.shape[0])
                    buffers.insert_many(leaf, rows[:take])
                    if take < rows.shape[0]:
                        spill.append((leaf, rows[take:]))
                        if stats is not None:
                            stats.spilled += rows.shape[0] - take
                if stats is not None:
                    stats.buffer_seconds += time.perf_counter() - t2

            queues_empty = input_pos >= m and reinsert.total == 0
            if buffers.total and (buffers.max_fill() >= config.half_full_threshold
                                  or queues_empty):
                if stats is not None:
                    stats.process_rounds += 1
                    stats.leaf_scan_events += buffers.total
                back = process_all_buffers(tree, buffers, states, pipeline)
                reinsert.push(back)

            if debug_audit:
                held = (int(states.done.sum()) + (m - input_pos) + reinsert.total
                        + buffers.total + sum(r.shape[0] for _, r in spill))
                if held != m:
                    raise AssertionError(
                        f"query conservation violated: accounted {held} of {m}")
    finally:
        pipeline.close()
        if own_device:
            device.close()

    if stats is not None:
        stats.visited_per_query = states.leaves_visited.copy()
        stats.leaf_sequences = states.leaf_sequences
    return states.neighbors
