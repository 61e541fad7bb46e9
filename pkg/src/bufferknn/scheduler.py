"""Work partitioning: leaf-structure chunks, query chunks, device fleets.

Chunk j of n points (0-based, N chunks) covers [ceil(j*n/N),
ceil((j+1)*n/N)); the ranges are contiguous, cover everything exactly
once and differ in size by at most one.  Queries are likewise split into
contiguous near-equal ranges, each small enough for a device's query
block.  Because every query's traversal is independent and arithmetic is
fixed, any division of queries over devices produces bit-identical
results; fleet size only changes wall time.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass

import numpy as np

from .core import NeighborBatch, SearchParams
from .buffer_tree import BufferConfig, BufferKdTree, SearchStats, lazy_search

__all__ = [
    "ChunkPlan",
    "plan_chunks",
    "assign_query_to_chunks",
    "chunk_queries",
    "DeviceFleet",
    "run_multi_device",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChunkPlan:
    """Division of n leaf-structure rows into contiguous chunks."""

    n: int
    bounds: np.ndarray  # (num_chunks + 1,) int64; chunk j is [bounds[j], bounds[j+1])

    @staticmethod
    def build(n: int, num_chunks: int) -> "ChunkPlan":
        if n < 1:
            raise ValueError("n must be >= 1")
        if not 1 <= num_chunks <= n:
            raise ValueError(f"num_chunks must be in [1, {n}], got {num_chunks}")
        j = np.arange(num_chunks + 1, dtype=np.int64)
        bounds = (j * n + num_chunks - 1) // num_chunks  # ceil(j*n/N)
        return ChunkPlan(n=n, bounds=bounds)

    @property
    def num_chunks(self) -> int:
        return self.bounds.shape[0] - 1

    @property
    def max_len(self) -> int:
        return int(np.diff(self.bounds).max())

    def range(self, j: int) -> tuple[int, int]:
        return int(self.bounds[j]), int(self.bounds[j + 1])

    def ranges(self) -> list[tuple[int, int]]:
        return [self.range(j) for j in range(self.num_chunks)]

    def overlapping(self, lo: int, hi: int) -> tuple[int, int]:
        """Chunk index range [j0, j1) intersecting rows [lo, hi)."""
        if not 0 <= lo < hi <= self.n:
            raise ValueError(f"range [{lo}, {hi}) not inside [0, {self.n})")
        j0 = int(np.searchsorted(self.bounds[1:], lo, side="right"))
        j1 = int(np.searchsorted(self.bounds[:-1], hi, side="left"))
        return j0, j1


def plan_chunks(n: int, num_chunks: int, chunk_capacity_bytes: int | None = None,
                point_bytes: int | None = None) -> ChunkPlan:
    """Build a chunk plan, checking it against a per-chunk byte budget.

    With a capacity given, the largest chunk must fit; the error message
    names the smallest chunk count that would.
    """
    plan = ChunkPlan.build(n, num_chunks)
    if chunk_capacity_bytes is not None:
        if point_bytes is None or point_bytes < 1:
            raise ValueError("point_bytes must accompany chunk_capacity_bytes")
        need = plan.max_len * point_bytes + 7  # worst-case alignment pad
        if need > chunk_capacity_bytes:
            fit = (chunk_capacity_bytes - 7) // point_bytes
            if fit < 1:
                raise ValueError(
                    f"chunk capacity {chunk_capacity_bytes} cannot hold even one "
                    f"{point_bytes}-byte point")
            suggest = -(-n // fit)
            raise ValueError(
                f"chunk of {plan.max_len} points needs {need} bytes, capacity is "
                f"{chunk_capacity_bytes}; use at least {suggest} chunks")
    return plan


def assign_query_to_chunks(lo: int, hi: int, plan: ChunkPlan) -> list[tuple[int, int, int]]:
    """Chunks a leaf range [lo, hi) must visit, with clipped sub-ranges.

    Returns (chunk_index, clip_lo, clip_hi) triples; the clips are
    disjoint and their union is exactly [lo, hi).
    """
    j0, j1 = plan.overlapping(lo, hi)
    out = []
    for j in range(j0, j1):
        clo, chi = plan.range(j)
        out.append((j, max(lo, clo), min(hi, chi)))
    return out


def chunk_queries(m: int, capacity: int) -> list[tuple[int, int]]:
    """Split m queries into contiguous ranges of at most `capacity`,
    sizes differing by at most one."""
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    if m <= 0:
        return []
    num = -(-m // capacity)
    base = m // num
    rem = m % num
    out = []
    lo = 0
    for i in range(num):
        size = base + (1 if i < rem else 0)
        out.append((lo, lo + size))
        lo += size
    return out


@dataclass
class DeviceFleet:
    """A set of identically configured simulated devices."""

    devices: list

    def __len__(self) -> int:
        return len(self.devices)

    def close(self) -> None:
        for dev in self.devices:
            dev.close()


def run_multi_device(fleet: DeviceFleet, tree: BufferKdTree, queries,
                     params: SearchParams, config: BufferConfig, plan: ChunkPlan,
                     query_chunk_size: int | None = None, *,
                     stats_out: list[SearchStats] | None = None) -> NeighborBatch:
    """Run the lazy search across a device fleet.

    Queries are split evenly over the devices (remainder handed out one
    each from the front), then each device works through its share in
    query chunks of at most `query_chunk_size`.  If a device fails, its
    unfinished ranges are re-dispatched to the surviving devices; results
    do not depend on the fleet size or on failures.
    """
    qarr = np.ascontiguousarray(queries.data if hasattr(queries, "data") else queries,
                                dtype=np.float32)
    if qarr.ndim != 2 or qarr.shape[1] != tree.d:
        raise ValueError(f"queries must be (m, {tree.d}), got {qarr.shape}")
    params.validate(tree.n)
    n_dev = len(fleet.devices)
    if n_dev < 1:
        raise ValueError("fleet is empty")
    m = qarr.shape[0]
    merged = NeighborBatch(m, params.k)
    if m == 0:
        return merged

    base = m // n_dev
    rem = m % n_dev
    shares: list[list[tuple[int, int]]] = []
    lo = 0
    for i in range(n_dev):
        size = base + (1 if i < rem else 0)
        if size == 0:
            shares.append([])
            continue
        cap = size if query_chunk_size is None else query_chunk_size
        shares.append([(lo + a, lo + b) for a, b in chunk_queries(size, cap)])
        lo += size

    alive = [True] * n_dev
    stats_lock = threading.Lock()

    def drive(dev_i: int, ranges: list[tuple[int, int]]) -> tuple[int, int] | None:
        """Run ranges on one device; returns the failing range, if any."""
        dev = fleet.devices[dev_i]
        for r_lo, r_hi in ranges:
            st = SearchStats() if stats_out is not None else None
            try:
                res = lazy_search(tree, qarr[r_lo:r_hi], params, config, dev, plan,
                                  stats=st)
            except Exception:
                log.warning("device %d failed on query range [%d, %d); re-dispatching",
                            dev_i, r_lo, r_hi, exc_info=True)
                alive[dev_i] = False
                done_upto = ranges.index((r_lo, r_hi))
                _pending.extend(ranges[done_upto:])
                return (r_lo, r_hi)
            merged.keys[r_lo:r_hi] = res.keys
            merged.counts[r_lo:r_hi] = res.counts
            if st is not None:
                with stats_lock:
                    stats_out.append(st)
        return None

    _pending: list[tuple[int, int]] = []
    work = shares
    while True:
        threads = []
        for i, ranges in enumerate(work):
            if ranges and alive[i]:
                t = threading.Thread(target=drive, args=(i, ranges))
                t.start()
                threads.append(t)
        for t in threads:
            t.join()
        if not _pending:
            break
        survivors = [i for i in range(n_dev) if alive[i]]
        if not survivors:
            raise RuntimeError("every device failed; search cannot finish")
        redo = _pending
        _pending = []
        work = [[] for _ in range(n_dev)]
        for idx, rng in enumerate(redo):
            work[survivors[idx % len(survivors)]].append(rng)
    return merged
