"""Simulated constrained-memory parallel device.

Models the piece of hardware the chunked scan runs on: a memory budget
that must hold two chunk-sized buffers plus the query block, two
in-order command queues served by real threads, one-shot waitable
events, and a transfer path whose bandwidth can be throttled to make
copy/compute overlap observable.  Work submitted to one queue completes
in submission order; commands on different queues run concurrently
unless linked by an explicit event dependency.

Every executed command is appended to a timeline trace as
(command_kind, queue_id, chunk_id, t_start_ns, t_end_ns) with kinds
"stage" (host memory into a staging buffer), "copy" (staging buffer into
a device chunk buffer), "compute" (brute-force scan of resident chunk
data) and "marker".  An always-on hazard checker rejects any command
that would write a buffer someone is reading or read a buffer being
written; violations raise PipelineHazardError and are also recorded on
the device for auditing.
"""

from __future__ import annotations

import queue as queue_mod
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import NeighborBatch, pack_keys, sq_distances_block

__all__ = [
    "DeviceSpec",
    "DeviceConfigError",
    "PipelineHazardError",
    "Event",
    "CommandQueue",
    "SimulatedDevice",
    "ChunkPipeline",
    "device_init",
    "run_chunk_pipeline",
    "chunk_required",
    "trace_phase_totals",
    "audit_copy_overlap",
]


class DeviceConfigError(ValueError):
    """A requested configuration does not fit the device."""


class PipelineHazardError(RuntimeError):
    """A command touched a buffer that was in use the wrong way."""


def chunk_required(n_points: int, d: int) -> int:
    """Bytes one chunk buffer needs for n_points: float32 coordinates
    followed by 8-byte original indices, index block 8-aligned."""
    pts = n_points * d * 4
    return (pts + 7) // 8 * 8 + n_points * 8


class Event:
    """One-shot completion event; wait() any number of times.

    If the command failed, every wait() re-raises its exception.
    """

    __slots__ = ("_ev", "_exc")

    def __init__(self) -> None:
        self._ev = threading.Event()
        self._exc: BaseException | None = None

    def _complete(self, exc: BaseException | None = None) -> None:
        self._exc = exc
        self._ev.set()

    @property
    def done(self) -> bool:
        return self._ev.is_set()

    def wait(self, timeout: float | None = None) -> None:
        if not self._ev.wait(timeout):
            raise TimeoutError("command did not complete in time")
        if self._exc is not None:
            raise self._exc


@dataclass
class _Command:
    kind: str
    chunk_id: int
    fn: object
    deps: tuple
    event: Event


class CommandQueue:
    """In-order command stream served by one worker thread."""

    def __init__(self, queue_id: str) -> None:
        self.queue_id = queue_id
        self._q: queue_mod.SimpleQueue = queue_mod.SimpleQueue()
        self._thread = threading.Thread(target=self._run, daemon=True,
                                        name=f"cmdqueue-{queue_id}")
        self._thread.start()

    def submit(self, kind: str, chunk_id: int, fn, deps: tuple = ()) -> Event:
        ev = Event()
        self._q.put(_Command(kind, chunk_id, fn, deps, ev))
        return ev

    def _run(self) -> None:
        while True:
            cmd = self._q.get()
            if cmd is None:
                return
            try:
                for dep in cmd.deps:
                    dep.wait()
                cmd.fn()
            except BaseException as exc:  # propagate through the event
                cmd.event._complete(exc)
            else:
                cmd.event._complete()

    def close(self) -> None:
        self._q.put(None)
        self._thread.join(timeout=30)


class _Claims:
    """Reader/writer claims per named buffer; conflicts are hazards."""

    def __init__(self, violations: list) -> None:
        self._lock = threading.Lock()
        self._readers: dict[str, int] = {}
        self._writer: dict[str, bool] = {}
        self._violations = violations

    def acquire(self, name: str, write: bool) -> None:
        with self._lock:
            readers = self._readers.get(name, 0)
            writing = self._writer.get(name, False)
            if writing or (write and readers > 0):
                msg = (f"{'write' if write else 'read'} of {name} while "
                       f"{'written' if writing else 'read'} by another command")
                self._violations.append(msg)
                raise PipelineHazardError(msg)
            if write:
                self._writer[name] = True
            else:
                self._readers[name] = readers + 1

    def release(self, name: str, write: bool) -> None:
        with self._lock:
            if write:
                self._writer[name] = False
            else:
                self._readers[name] -= 1


@dataclass(frozen=True)
class DeviceSpec:
    """Static description of one simulated device.

    memory_capacity is in bytes and must cover two chunk buffers plus
    the query block.  worker_lanes is how many threads the brute kernel
    may spread leaf groups over.  simulated_copy_rate, if set, throttles
    staging-to-device transfers to that many bytes per second so that
    copies take simulated time proportional to their size.
    """

    memory_capacity: int
    worker_lanes: int = 1
    simulated_copy_rate: float | None = None


class SimulatedDevice:
    """Two chunk buffers, two staging buffers, two command queues."""

    def __init__(self, spec: DeviceSpec, chunk_bytes: int, query_block_bytes: int) -> None:
        if chunk_bytes < 1 or query_block_bytes < 0:
            raise DeviceConfigError("chunk_bytes must be >= 1 and query block >= 0")
        required = 2 * chunk_bytes + query_block_bytes
        if required > spec.memory_capacity:
            raise DeviceConfigError(
                f"device memory exceeded: need {required} bytes "
                f"(2 x {chunk_bytes} chunk buffers + {query_block_bytes} query block), "
                f"capacity is {spec.memory_capacity}")
        if spec.worker_lanes < 1:
            raise DeviceConfigError("worker_lanes must be >= 1")
        self.spec = spec
        self.chunk_bytes = chunk_bytes
        self.query_block_bytes = query_block_bytes
        self._device_buf = [np.empty(chunk_bytes, np.uint8) for _ in range(2)]
        self._staging = [np.empty(chunk_bytes, np.uint8) for _ in range(2)]
        self.hazard_violations: list[str] = []
        self._claims = _Claims(self.hazard_violations)
        self.trace: list[tuple[str, str, int, int, int]] = []
        self._trace_lock = threading.Lock()
        self.queues = {"A": CommandQueue("A"), "B": CommandQueue("B")}
        self._lanes = (ThreadPoolExecutor(max_workers=spec.worker_lanes)
                       if spec.worker_lanes > 1 else None)
        self._closed = False
        # test hooks: floor kernel duration / inject a failure after n kernels
        self._kernel_min_seconds = 0.0
        self._fail_kernels_after: int | None = None
        self._kernels_run = 0

    # -- bookkeeping

    def _record(self, kind: str, queue_id: str, chunk_id: int, t0: int, t1: int) -> None:
        with self._trace_lock:
            self.trace.append((kind, queue_id, chunk_id, t0, t1))

    def write_trace(self, path: str) -> None:
        with self._trace_lock:
            rows = list(self.trace)
        with open(path, "w", encoding="utf-8") as fh:
            for kind, qid, cid, t0, t1 in rows:
                fh.write(f"{kind},{qid},{cid},{t0},{t1}\n")

    # -- commands

    def enqueue_stage(self, queue_id: str, slot: int, points_src: np.ndarray,
                      ids_src: np.ndarray, chunk_id: int, deps: tuple = ()) -> Event:
        """Copy a (points, ids) slice of host memory into staging[slot]."""
        L, d = points_src.shape
        need = chunk_required(L, d)
        if need > self.chunk_bytes:
            raise DeviceConfigError(
                f"chunk of {L} points x {d} dims needs {need} bytes, "
                f"chunk buffers hold {self.chunk_bytes}")
        pts_bytes = L * d * 4
        ids_off = (pts_bytes + 7) // 8 * 8

        def fn() -> None:
            self._claims.acquire(f"staging{slot}", write=True)
            try:
                t0 = time.monotonic_ns()
                buf = self._staging[slot]
                buf[:pts_bytes] = np.ascontiguousarray(points_src, np.float32) \
                    .reshape(-1).view(np.uint8)
                buf[ids_off: ids_off + L * 8] = np.ascontiguousarray(ids_src, np.int64) \
                    .view(np.uint8)
                t1 = time.monotonic_ns()
            finally:
                self._claims.release(f"staging{slot}", write=True)
            self._record("stage", queue_id, chunk_id, t0, t1)

        return self.queues[queue_id].submit("stage", chunk_id, fn, deps)

    def enqueue_copy(self, queue_id: str, slot: int, nbytes: int, chunk_id: int,
                     deps: tuple = ()) -> Event:
        """Transfer staging[slot] into device chunk buffer `slot`."""
        if nbytes > self.chunk_bytes:
            raise DeviceConfigError(f"copy of {nbytes} bytes exceeds chunk buffer")

        def fn() -> None:
            self._claims.acquire(f"staging{slot}", write=False)
            try:
                self._claims.acquire(f"device{slot}", write=True)
                try:
                    t0 = time.monotonic_ns()
                    self._device_buf[slot][:nbytes] = self._staging[slot][:nbytes]
                    if self.spec.simulated_copy_rate is not None:
                        target = nbytes / self.spec.simulated_copy_rate
                        left = target - (time.monotonic_ns() - t0) / 1e9
                        if left > 0:
                            time.sleep(left)
                    t1 = time.monotonic_ns()
                finally:
                    self._claims.release(f"device{slot}", write=True)
            finally:
                self._claims.release(f"staging{slot}", write=False)
            self._record("copy", queue_id, chunk_id, t0, t1)

        return self.queues[queue_id].submit("copy", chunk_id, fn, deps)

    def enqueue_brute_kernel(self, queue_id: str, slot: int, chunk_lo: int,
                             chunk_hi: int, d: int,
                             groups: list[tuple[np.ndarray, int, int]],
                             queries: np.ndarray, neighbors: NeighborBatch,
                             chunk_id: int, deps: tuple = ()) -> Event:
        """Scan resident chunk data against each group's queries.

        A group is (query rows, lo, hi) with [lo, hi) inside the chunk's
        range; one lane handles one group at a time and groups never
        share a query row, so merges into `neighbors` are race-free.
        """
        L = chunk_hi - chunk_lo
        for rows, lo, hi in groups:
            if not (chunk_lo <= lo < hi <= chunk_hi):
                raise ValueError(
                    f"group range [{lo}, {hi}) outside chunk [{chunk_lo}, {chunk_hi})")
            if rows.shape[0] == 0:
                raise ValueError("empty query group")
        pts_bytes = L * d * 4
        ids_off = (pts_bytes + 7) // 8 * 8

        def fn() -> None:
            self._kernels_run += 1
            if (self._fail_kernels_after is not None
                    and self._kernels_run > self._fail_kernels_after):
                raise RuntimeError("injected device failure")
            self._claims.acquire(f"device{slot}", write=False)
            try:
                t0 = time.monotonic_ns()
                buf = self._device_buf[slot]
                pts = buf[:pts_bytes].view(np.float32).reshape(L, d)
                ids = buf[ids_off: ids_off + L * 8].view(np.int64)

                def scan(group: tuple[np.ndarray, int, int]) -> None:
                    rows, lo, hi = group
                    block = pts[lo - chunk_lo: hi - chunk_lo]
                    bids = ids[lo - chunk_lo: hi - chunk_lo]
                    dmat = sq_distances_block(queries[rows], block)
                    neighbors.update_rows(rows, pack_keys(dmat, bids[None, :]))

                if self._lanes is not None and len(groups) > 1:
                    list(self._lanes.map(scan, groups))
                else:
                    for g in groups:
                        scan(g)
                if self._kernel_min_seconds > 0.0:
                    left = self._kernel_min_seconds - (time.monotonic_ns() - t0) / 1e9
                    if left > 0:
                        time.sleep(left)
                t1 = time.monotonic_ns()
            finally:
                self._claims.release(f"device{slot}", write=False)
            self._record("compute", queue_id, chunk_id, t0, t1)

        return self.queues[queue_id].submit("compute", chunk_id, fn, deps)

    def wait(self, target) -> None:
        """Block until an Event completes, or until a queue (by id) drains."""
        if isinstance(target, Event):
            target.wait()
            return

        def fn() -> None:
            now = time.monotonic_ns()
            self._record("marker", target, -1, now, now)

        self.queues[target].submit("marker", -1, fn).wait()

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        for q in self.queues.values():
            q.close()
        if self._lanes is not None:
            self._lanes.shutdown(wait=True)


def device_init(spec: DeviceSpec, chunk_bytes: int, query_block_bytes: int) -> SimulatedDevice:
    """Allocate a simulated device; raises DeviceConfigError if the
    budget cannot hold two chunk buffers plus the query block."""
    return SimulatedDevice(spec, chunk_bytes, query_block_bytes)


class ChunkPipeline:
    """Streams (points, ids) chunks through a device's two chunk buffers.

    Per chunk j the round runs three phases: enqueue the brute kernel for
    the resident chunk, enqueue stage+copy of the next chunk into the
    other buffer on the other queue, then wait for the kernel.  Kernels
    alternate between queues A (even chunks) and B (odd chunks), copies
    use the opposite queue, so each transfer overlaps the previous
    chunk's compute.  After the last chunk the first chunk is re-staged
    for the next round; the kernel that will use it waits on that copy's
    event, which also covers the cross-queue case.
    """

    def __init__(self, device: SimulatedDevice, points: np.ndarray,
                 ids: np.ndarray, plan) -> None:
        if points.shape[0] != plan.n:
            raise ValueError(f"plan covers {plan.n} points, structure has {points.shape[0]}")
        need = chunk_required(plan.max_len, points.shape[1])
        if need > device.chunk_bytes:
            d = points.shape[1]
            per_point = 4 * d + 8
            fit = max(1, (device.chunk_bytes - 7) // per_point)
            suggest = -(-plan.n // fit)
            raise DeviceConfigError(
                f"largest chunk ({plan.max_len} points) needs {need} bytes but chunk "
                f"buffers hold {device.chunk_bytes}; use at least {suggest} chunks")
        self.device = device
        self.points = points
        self.ids = ids
        self.plan = plan
        self._next_slot = 0
        self._slot_chunk: list[int | None] = [None, None]
        self._copy_events: list[Event | None] = [None, None]

    def _load(self, chunk_id: int, queue_id: str) -> None:
        slot = self._next_slot
        self._next_slot ^= 1
        # a chunk nobody scanned leaves its transfer un-awaited; drain it
        # before overwriting the slot, or the new stage could race it on
        # the other queue (a scanned chunk's transfer is already done)
        prev = self._copy_events[slot]
        if prev is not None and not prev.done:
            prev.wait()
        lo, hi = self.plan.range(chunk_id)
        L = hi - lo
        self.device.enqueue_stage(queue_id, slot, self.points[lo:hi],
                                  self.ids[lo:hi], chunk_id)
        ev = self.device.enqueue_copy(queue_id, slot,
                                      chunk_required(L, self.points.shape[1]),
                                      chunk_id)
        if self._slot_chunk[1 - slot] == chunk_id:
            self._slot_chunk[1 - slot] = None  # the fresh copy supersedes it
        self._slot_chunk[slot] = chunk_id
        self._copy_events[slot] = ev

    def run_round(self, groups_per_chunk: list[list[tuple[np.ndarray, int, int]]],
                  queries: np.ndarray, neighbors: NeighborBatch) -> None:
        """One pass over all chunks, scanning each chunk's query groups."""
        plan = self.plan
        N = plan.num_chunks
        if len(groups_per_chunk) != N:
            raise ValueError(f"expected {N} group lists, got {len(groups_per_chunk)}")
        d = self.points.shape[1]
        if self._slot_chunk[0] is None and self._slot_chunk[1] is None:
            self._load(0, "A")  # first round: nothing resident yet
        for j in range(N):
            kq = "A" if j % 2 == 0 else "B"
            cq = "B" if kq == "A" else "A"
            slot = self._slot_chunk.index(j)
            lo, hi = plan.range(j)
            groups = groups_per_chunk[j]
            kernel_ev = None
            if groups:
                kernel_ev = self.device.enqueue_brute_kernel(
                    kq, slot, lo, hi, d, groups, queries, neighbors,
                    chunk_id=j, deps=(self._copy_events[slot],))
            nxt = j + 1 if j + 1 < N else 0
            self._load(nxt, cq)
            if kernel_ev is not None:
                self.device.wait(kernel_ev)

    def close(self) -> None:
        """Wait out any in-flight transfer so the device ends quiescent."""
        for ev in self._copy_events:
            if ev is not None and not ev.done:
                try:
                    ev.wait()
                except PipelineHazardError:
                    raise
                except RuntimeError:
                    pass  # a failed transfer surfaces via whoever depended on it


def run_chunk_pipeline(device: SimulatedDevice, points: np.ndarray, ids: np.ndarray,
                       plan, groups_per_chunk, queries: np.ndarray,
                       neighbors: NeighborBatch) -> None:
    """One-shot convenience: build a pipeline, run one round, close it."""
    pipeline = ChunkPipeline(device, points, ids, plan)
    try:
        pipeline.run_round(groups_per_chunk, queries, neighbors)
    finally:
        pipeline.close()


# -- trace analysis ----------------------------------------------------------


def trace_phase_totals(trace: list[tuple[str, str, int, int, int]]) -> dict[str, float]:
    """Total seconds spent per command kind."""
    out: dict[str, float] = {}
    for kind, _qid, _cid, t0, t1 in trace:
        out[kind] = out.get(kind, 0.0) + (t1 - t0) / 1e9
    return out

def audit_copy_overlap(trace: list[tuple[str, str, int, int, int]],
                       num_chunks: int) -> list[str]:
    """Check that within each round, the transfer of chunk j started
    before the compute of chunk j-1 ended.  Returns failure messages
    (empty list = full overlap).  Kernel-less chunks break the pairing,
    so feed this traces from runs where every chunk had work.
    """
    kernels = sorted((r for r in trace if r[0] == "compute"), key=lambda r: r[3])
    copies = sorted((r for r in trace if r[0] == "copy"), key=lambda r: r[3])
    failures: list[str] = []
    if not kernels:
        return ["no compute commands in trace"]
    # copies[0] is the initial load; copy t+1 is issued while kernel t runs
    for t in range(1, len(kernels)):
        j = kernels[t][2]
        if j == 0:
            continue  # round boundary: the wrap-around load, not copy(j)
        if t >= len(copies):
            failures.append(f"missing copy record for kernel {t}")
            continue
        cp = copies[t]
        if cp[2] != j:
            failures.append(f"copy {t} loads chunk {cp[2]}, expected {j}")
            continue
        if not cp[3] < kernels[t - 1][4]:
            failures.append(
                f"chunk {j}: copy started at {cp[3]} after compute of chunk "
                f"{kernels[t - 1][2]} ended at {kernels[t - 1][4]}")
    return failures
