"""Exact brute-force k-NN baselines.

`brute_knn` scans every (query, reference) pair directly; it is the
ground truth the tree engines are checked against.  `brute_knn_chunked`
runs the same scan through the simulated device so the reference set can
exceed device memory; both produce bit-identical results.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import (
    NeighborBatch,
    SearchParams,
    as_point_matrix,
    pack_keys,
    sq_distances_block,
    _topk_keys,
)

__all__ = ["EvalCounter", "brute_knn", "brute_knn_chunked"]

_BLOCK = 256  # queries per scan block; keeps the distance matrix small


@dataclass
class EvalCounter:
    """Counts evaluated (query, reference) distance pairs."""

    pairs: int = 0


def _empty_batch(k: int) -> NeighborBatch:
    return NeighborBatch(0, k)


def brute_knn(refs, queries, params: SearchParams, workers: int = 1,
              counter: EvalCounter | None = None) -> NeighborBatch:
    """k nearest references for each query by full pairwise scan.

    Queries are processed in independent blocks; `workers` threads only
    change how blocks are scheduled, never the result.
    """
    refs = as_point_matrix(refs)
    qarr = np.ascontiguousarray(queries.data if hasattr(queries, "data") else queries,
                                dtype=np.float32)
    if qarr.ndim != 2 or qarr.shape[1] != refs.d:
        raise ValueError(f"queries must be (m, {refs.d}), got {qarr.shape}")
    params.validate(refs.n)
    if workers < 1:
        raise ValueError("workers must be >= 1")
    m = qarr.shape[0]
    if m == 0:
        return _empty_batch(params.k)

    out = NeighborBatch(m, params.k)
    rdata = refs.data
    ridx = np.arange(refs.n, dtype=np.uint64)
    blocks = [(lo, min(lo + _BLOCK, m)) for lo in range(0, m, _BLOCK)]

    def scan(block: tuple[int, int]) -> None:
        lo, hi = block
        dmat = sq_distances_block(qarr[lo:hi], rdata)
        keys = pack_keys(dmat, ridx[None, :])
        out.set_rows(np.arange(lo, hi), _topk_keys(keys, params.k), refs.n)

    if workers == 1 or len(blocks) == 1:
        for b in blocks:
            scan(b)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(scan, blocks))

    if counter is not None:
        counter.pairs += m * refs.n
    return out


def brute_knn_chunked(refs, queries, params: SearchParams, device, plan) -> NeighborBatch:
    """Brute-force scan streamed through a simulated device in chunks.

    The reference set is split by `plan`; every chunk is copied to the
    device and scanned against all queries with the same overlapped
    pipeline the tree engine uses.  Bit-identical to brute_knn.
    """
    from .device import ChunkPipeline  # deferred to avoid a module cycle

    refs = as_point_matrix(refs)
    qarr = np.ascontiguousarray(queries.data if hasattr(queries, "data") else queries,
                                dtype=np.float32)
    if qarr.ndim != 2 or qarr.shape[1] != refs.d:
        raise ValueError(f"queries must be (m, {refs.d}), got {qarr.shape}")
    params.validate(refs.n)
    if plan.n != refs.n:
        raise ValueError(f"plan covers {plan.n} points but refs has {refs.n}")
    m = qarr.shape[0]
    if m == 0:
        return _empty_batch(params.k)

    out = NeighborBatch(m, params.k)
    all_rows = np.arange(m, dtype=np.int64)
    ids = np.arange(refs.n, dtype=np.int64)
    pipeline = ChunkPipeline(device, refs.data, ids, plan)
    try:
        groups = [[(all_rows, lo, hi)] for lo, hi in plan.ranges()]
        pipeline.run_round(groups, qarr, out)
    finally:
        pipeline.close()
    return out
