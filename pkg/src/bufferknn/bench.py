"""Benchmark driver: run engines on one workload, compare and time them.

Every engine must produce the same neighbour indices bit for bit; the
run aborts with DigestMismatchError otherwise.  The digest is a sha256
over the (m, k) int64 index matrix, so it is independent of the engine,
tree height, buffer sizes, chunk count and device fleet used to get it.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import NeighborBatch, PointMatrix, SearchParams, as_point_matrix
from .brute import brute_knn
from .kdtree import build_kdtree, query_kdtree_parallel
from .buffer_tree import BufferConfig, SearchStats, build_buffer_tree, lazy_search
from .device import DeviceSpec, chunk_required, device_init, trace_phase_totals
from .scheduler import ChunkPlan, DeviceFleet, run_multi_device

__all__ = [
    "ENGINES",
    "DEFAULT_DEVICE_MEMORY",
    "DigestMismatchError",
    "result_digest",
    "query_block_bytes",
    "auto_height",
    "auto_num_chunks",
    "run_engine",
    "BenchConfig",
    "BenchReport",
    "run_benchmark",
]

ENGINES = ("brute", "kdtree", "bufferkdtree")
DEFAULT_DEVICE_MEMORY = 512 * 2 ** 20

# per resident query: float32 coordinates, packed result keys, fixed
# traversal state (stack cursor, flags, counters)
_PER_QUERY_OVERHEAD = 32


class DigestMismatchError(RuntimeError):
    """Two engines disagreed on the neighbour indices."""


def result_digest(neighbors) -> str:
    """sha256 over the neighbour index matrix as little-endian int64."""
    idx = neighbors.indices if isinstance(neighbors, NeighborBatch) else neighbors
    arr = np.ascontiguousarray(idx, dtype="<i8")
    return hashlib.sha256(arr.tobytes()).hexdigest()


def query_block_bytes(m: int, d: int, k: int) -> int:
    """Device bytes held per batch of m resident queries."""
    return m * (4 * d + 8 * k + _PER_QUERY_OVERHEAD)


def auto_height(n: int) -> int:
    """Default tree height: leaves of roughly 32 points, capped at 9."""
    return max(1, min(9, int(math.log2(max(2, n // 32)))))


def auto_num_chunks(n: int, d: int, qblock: int, memory_capacity: int) -> int:
    """Smallest chunk count whose two resident chunks plus the query
    block fit in the given device memory."""
    avail = memory_capacity - qblock
    per_point = 4 * d + 8
    if avail <= 0 or 2 * chunk_required(1, d) + qblock > memory_capacity:
        raise ValueError(
            f"device memory {memory_capacity} cannot hold the {qblock}-byte "
            f"query block plus two one-point chunks")
    fit = max(1, (avail // 2 - 7) // per_point)
    num = min(n, max(1, -(-n // fit)))
    while 2 * chunk_required(-(-n // num), d) + qblock > memory_capacity:
        num += 1
        if num > n:
            raise ValueError(
                f"device memory {memory_capacity} too small even with one point per chunk")
    # the seed pads for worst-case alignment, so walk back to the true minimum
    while num > 1 and 2 * chunk_required(-(-n // (num - 1)), d) + qblock <= memory_capacity:
        num -= 1
    return num


def _fleet_query_caps(m: int, devices: int, query_chunk_size: int | None) -> int:
    share = -(-m // devices) if m else 1
    if query_chunk_size is not None:
        share = min(share, query_chunk_size)
    return max(1, share)


def run_engine(engine: str, refs, queries, params: SearchParams, *,
               height: int | None = None, num_chunks: int | None = None,
               devices: int = 1, device_memory: int = DEFAULT_DEVICE_MEMORY,
               copy_rate: float | None = None, buffer_capacity: int | None = None,
               fetch_multiple: int = 10, half_full_threshold: int | None = None,
               query_chunk_size: int | None = None, workers: int = 1,
               trace_out: str | None = None, collect_stats: bool = False
               ) -> tuple[NeighborBatch, dict]:
    """Run one engine end to end; returns the result and a metrics dict.

    The buffered engine resolves height and chunk count automatically
    when not given, sized so two chunks plus the query block fit in
    `device_memory`.
    """
    refs = as_point_matrix(refs)
    qarr = np.ascontiguousarray(queries.data if hasattr(queries, "data") else queries,
                                dtype=np.float32)
    m = qarr.shape[0]
    info: dict = {"engine": engine, "n": refs.n, "m": m, "d": refs.d, "k": params.k}

    if engine == "brute":
        t0 = time.perf_counter()
        res = brute_knn(refs, qarr, params, workers=workers)
        info["build_seconds"] = 0.0
        info["query_seconds"] = time.perf_counter() - t0
        return res, info

    if engine == "kdtree":
        t0 = time.perf_counter()
        tree = build_kdtree(refs)
        info["build_seconds"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        res = query_kdtree_parallel(tree, qarr, params, threads=workers)
        info["query_seconds"] = time.perf_counter() - t0
        return res, info

    if engine != "bufferkdtree":
        raise ValueError(f"unknown engine {engine!r}, expected one of {ENGINES}")

    h = height if height is not None else auto_height(refs.n)
    t0 = time.perf_counter()
    tree = build_buffer_tree(refs, h)
    info["build_seconds"] = time.perf_counter() - t0

    config = BufferConfig.for_height(h, buffer_capacity, fetch_multiple,
                                     half_full_threshold)
    resident = m if devices == 1 else _fleet_query_caps(m, devices, query_chunk_size)
    qblock = query_block_bytes(max(1, resident), refs.d, params.k)
    num = num_chunks if num_chunks is not None else auto_num_chunks(
        refs.n, refs.d, qblock, device_memory)
    plan = ChunkPlan.build(refs.n, num)
    chunk_bytes = chunk_required(plan.max_len, refs.d)
    spec = DeviceSpec(memory_capacity=device_memory, worker_lanes=workers,
                      simulated_copy_rate=copy_rate)
    info.update(height=h, num_chunks=num, devices=devices,
                buffer_capacity=config.buffer_capacity,
                fetch_count=config.fetch_count,
                half_full_threshold=config.half_full_threshold)

    stats_list: list[SearchStats] = []
    t0 = time.perf_counter()
    if devices == 1:
        dev = device_init(spec, chunk_bytes, qblock)
        try:
            st = SearchStats() if collect_stats else None
            res = lazy_search(tree, qarr, params, config, dev, plan, stats=st)
            if st is not None:
                stats_list.append(st)
            info["query_seconds"] = time.perf_counter() - t0
            phases = trace_phase_totals(dev.trace)
            info["hazard_violations"] = len(dev.hazard_violations)
            if trace_out is not None:
                dev.write_trace(trace_out)
        finally:
            dev.close()
    else:
        fleet = DeviceFleet([device_init(spec, chunk_bytes, qblock)
                             for _ in range(devices)])
        try:
            res = run_multi_device(fleet, tree, qarr, params, config, plan,
                                   query_chunk_size,
                                   stats_out=stats_list if collect_stats else None)
            info["query_seconds"] = time.perf_counter() - t0
            phases: dict = {}
            for di, dev in enumerate(fleet.devices):
                for kind, secs in trace_phase_totals(dev.trace).items():
                    phases[kind] = phases.get(kind, 0.0) + secs
                if trace_out is not None:
                    p = Path(trace_out)
                    dev.write_trace(str(p.with_name(f"{p.stem}.dev{di}{p.suffix}")))
            info["hazard_violations"] = sum(len(d.hazard_violations)
                                           for d in fleet.devices)
        finally:
            fleet.close()

    info["phase_seconds"] = phases
    if stats_list:
        info["phase_seconds"]["find_leaf"] = sum(s.find_leaf_seconds for s in stats_list)
        info["phase_seconds"]["buffer"] = sum(s.buffer_seconds for s in stats_list)
        info["process_rounds"] = sum(s.process_rounds for s in stats_list)
        info["leaf_scan_events"] = sum(s.leaf_scan_events for s in stats_list)
        info["spilled"] = sum(s.spilled for s in stats_list)
        visited = np.concatenate([s.visited_per_query for s in stats_list
                                  if s.visited_per_query is not None])
        info["mean_leaves_visited"] = float(visited.mean()) if visited.size else 0.0
    return res, info


@dataclass
class BenchConfig:
    """Knobs for one benchmark run; None means pick automatically."""

    engines: tuple[str, ...] = ENGINES
    k: int = 10
    height: int | None = None
    num_chunks: int | None = None
    devices: int = 1
    device_memory: int = DEFAULT_DEVICE_MEMORY
    copy_rate: float | None = None
    buffer_capacity: int | None = None
    fetch_multiple: int = 10
    query_chunk_size: int | None = None
    workers: int = 1
    trace_out: str | None = None
    measure_chunk_ratio: bool = False
    measure_device_speedup: bool = False

    def __post_init__(self) -> None:
        if not self.engines:
            raise ValueError("engines must name at least one engine")
        for e in self.engines:
            if e not in ENGINES:
                raise ValueError(f"unknown engine {e!r}, expected one of {ENGINES}")


@dataclass
class BenchReport:
    """Comparable metrics for every engine plus cross-run extras."""

    workload: dict
    results: dict
    digest: str
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"workload": self.workload, "results": self.results,
                "digest": self.digest, "extras": self.extras}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def run_benchmark(refs, queries, config: BenchConfig) -> BenchReport:
    """Run the configured engines on one workload and cross-check them."""
    refs = as_point_matrix(refs)
    qarr = np.ascontiguousarray(queries.data if hasattr(queries, "data") else queries,
                                dtype=np.float32)
    params = SearchParams(k=config.k)
    params.validate(refs.n)

    common = dict(height=config.height, num_chunks=config.num_chunks,
                  devices=config.devices, device_memory=config.device_memory,
                  copy_rate=config.copy_rate, buffer_capacity=config.buffer_capacity,
                  fetch_multiple=config.fetch_multiple,
                  query_chunk_size=config.query_chunk_size, workers=config.workers)

    results: dict = {}
    digests: dict = {}
    for engine in config.engines:
        kw = dict(common) if engine == "bufferkdtree" else {"workers": config.workers}
        if engine == "bufferkdtree":
            kw.update(trace_out=config.trace_out, collect_stats=True)
        res, info = run_engine(engine, refs, qarr, params, **kw)
        info["digest"] = result_digest(res)
        digests[engine] = info["digest"]
        results[engine] = info

    if len(set(digests.values())) > 1:
        listing = ", ".join(f"{e}={d[:12]}" for e, d in digests.items())
        raise DigestMismatchError(f"engines disagree on neighbour indices: {listing}")

    extras: dict = {}
    if config.measure_chunk_ratio:
        extras["chunk_time_ratio"] = _chunk_time_ratio(refs, qarr, params, config)
    if config.measure_device_speedup and config.devices > 1:
        extras["device_speedup"] = _device_speedup(refs, qarr, params, config)

    workload = {"n": refs.n, "m": qarr.shape[0], "d": refs.d, "k": config.k}
    digest = next(iter(digests.values())) if digests else result_digest(
        np.empty((0, config.k), np.int64))
    return BenchReport(workload=workload, results=results, digest=digest, extras=extras)


def _buffer_time(refs, qarr, params, config: BenchConfig, num_chunks: int,
                 devices: int) -> float:
    t0 = time.perf_counter()
    run_engine("bufferkdtree", refs, qarr, params, height=config.height,
               num_chunks=num_chunks, devices=devices,
               device_memory=config.device_memory, copy_rate=config.copy_rate,
               buffer_capacity=config.buffer_capacity,
               fetch_multiple=config.fetch_multiple,
               query_chunk_size=config.query_chunk_size, workers=config.workers)
    return time.perf_counter() - t0


def _chunk_time_ratio(refs, qarr, params, config: BenchConfig) -> float:
    """Wall time with the configured chunk count over a single-chunk run."""
    many = config.num_chunks if config.num_chunks and config.num_chunks > 1 else 4
    t_many = _buffer_time(refs, qarr, params, config, many, 1)
    t_one = _buffer_time(refs, qarr, params, config, 1, 1)
    return t_many / t_one if t_one > 0 else float("inf")


def _device_speedup(refs, qarr, params, config: BenchConfig) -> float:
    """Wall time with one device over the configured fleet."""
    t_one = _buffer_time(refs, qarr, params, config, config.num_chunks or 1, 1)
    t_fleet = _buffer_time(refs, qarr, params, config, config.num_chunks or 1,
                           config.devices)
    return t_one / t_fleet if t_fleet > 0 else float("inf")
