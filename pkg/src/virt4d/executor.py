"""Job planning, locality-aware task assignment, and progressive execution.

A job is an abstract description of one analysis over one dataset.  It is
split into one task per partition; tasks run on worker slots (one per
physical core by default) and each completed partial is merged into the
result grid by the single coordinator thread, then emitted to the
progress sink exactly once.
"""

from __future__ import annotations

import enum
import queue
import threading
import time
import uuid
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import psutil

from .dataset import DatasetDescriptor
from .errors import JobStateError, SchedulingError
from .io_engine import ReadBackend, TilingPlan
from .kernels import AnalysisSpec, ResultGrid, run_partition_task

DEFAULT_TIME_BUDGET_S = 0.1  # per-partition responsiveness target


class JobStatus(str, enum.Enum):
    PENDING = "pending"
    RUNNING = "running"
    DONE = "done"
    CANCELLED = "cancelled"
    FAILED = "failed"


_ALLOWED = {
    JobStatus.PENDING: {JobStatus.RUNNING, JobStatus.CANCELLED},
    JobStatus.RUNNING: {JobStatus.DONE, JobStatus.CANCELLED, JobStatus.FAILED},
    JobStatus.DONE: set(),
    JobStatus.CANCELLED: set(),
    JobStatus.FAILED: set(),
}


@dataclass
class Job:
    descriptor: DatasetDescriptor
    dataset_dir: str
    spec: AnalysisSpec
    job_id: str = field(default_factory=lambda: uuid.uuid4().hex)
    status: JobStatus = JobStatus.PENDING
    created_at: float = field(default_factory=time.time)
    started_at: float | None = None
    finished_at: float | None = None
    error: str | None = None

    def __post_init__(self):
        self._cancel = threading.Event()
        self._lock = threading.Lock()

    def transition(self, new: JobStatus) -> None:
        with self._lock:
            if new not in _ALLOWED[self.status]:
                raise JobStateError(
                    f"job {self.job_id}: illegal transition {self.status.value} "
                    f"-> {new.value}")
            self.status = new
            if new is JobStatus.RUNNING:
                self.started_at = time.time()
            elif new in (JobStatus.DONE, JobStatus.CANCELLED, JobStatus.FAILED):
                self.finished_at = time.time()

    def request_cancel(self) -> None:
        self._cancel.set()

    @property
    def cancel_requested(self) -> bool:
        return self._cancel.is_set()


@dataclass
class Task:
    job_id: str
    partition_index: int
    node: str | None = None
    slot: int | None = None
    non_local: bool = False
    state: str = "pending"


def plan_tasks(job: Job) -> list[Task]:
    """One task per partition, ordered by partition index; deterministic."""
    job.descriptor.validate()
    return [Task(job_id=job.job_id, partition_index=p.index)
            for p in job.descriptor.partitions]


# -- worker pools ------------------------------------------------------------

@dataclass
class WorkerSlot:
    node_id: str
    slot_id: int
    busy: bool = False


class InProcessPool:
    """One worker thread per slot inside the coordinator process.

    Default slot count is the physical core count (hyperthread slots are
    opt-in via ``workers``).  Each worker has its own inbox; completions
    funnel into one queue consumed by the coordinator.
    """

    def __init__(self, workers: int | None = None, node_id: str = "local",
                 data_dirs: dict[str, str] | None = None):
        if workers is None:
            workers = psutil.cpu_count(logical=False) or 1
        if workers < 1:
            raise SchedulingError("empty pool")
        self.completions: queue.Queue = queue.Queue()
        self.slots = [WorkerSlot(node_id, i) for i in range(workers)]
        self._data_dirs = data_dirs or {}
        self._inboxes = [queue.Queue() for _ in self.slots]
        self._threads = []
        for i in range(workers):
            t = threading.Thread(target=self._worker_loop, args=(i,), daemon=True)
            t.start()
            self._threads.append(t)

    def node_ids(self) -> list[str]:
        return sorted({s.node_id for s in self.slots})

    def _worker_loop(self, idx: int):
        inbox = self._inboxes[idx]
        while True:
            item = inbox.get()
            if item is None:
                return
            job, task, partition, plan, backend = item
            data_dir = self._data_dirs.get(self.slots[idx].node_id,
                                           job.dataset_dir)
            try:
                partial = run_partition_task(
                    data_dir, job.descriptor, partition, job.spec,
                    plan=plan, backend=backend,
                    cancel_check=lambda: job.cancel_requested)
                kind = "cancelled" if partial is None else "done"
                self.completions.put((idx, task, kind, partial))
            except Exception as exc:  # reported, not raised, in worker context
                self.completions.put((idx, task, "failed", str(exc)))

    def submit(self, slot_idx: int, job: Job, task: Task, partition,
               plan, backend) -> None:
        self.slots[slot_idx].busy = True
        self._inboxes[slot_idx].put((job, task, partition, plan, backend))

    def mark_free(self, slot_idx: int) -> None:
        self.slots[slot_idx].busy = False

    def notify_cancel(self, job: "Job") -> None:
        pass  # in-process workers see the job's cancel event directly

    def close(self):
        for inbox in self._inboxes:
            inbox.put(None)
        for t in self._threads:
            t.join(timeout=5)


# -- assignment --------------------------------------------------------------

class LocalityMap:
    """partition_index -> node ids holding a local replica."""

    def __init__(self, holders: dict[int, set[str]] | None = None):
        self._holders = {k: set(v) for k, v in (holders or {}).items()}

    @classmethod
    def from_descriptor(cls, descriptor: DatasetDescriptor) -> "LocalityMap":
        return cls({p.index: set(p.preferred_nodes)
                    for p in descriptor.partitions if p.preferred_nodes})

    def holders(self, partition_index: int) -> set[str]:
        return self._holders.get(partition_index, set())


def assign(task: Task, locality_map: LocalityMap | None, pool) -> int:
    """Pick a free slot: least-loaded holder node first (ties to the lowest
    node id), else least-loaded non-holder with the task flagged non-local."""
    free = [(i, s) for i, s in enumerate(pool.slots) if not s.busy]
    if not pool.slots:
        raise SchedulingError("empty pool")
    if not free:
        raise SchedulingError("no free worker slot")
    load = {n: 0 for n in pool.node_ids()}
    for s in pool.slots:
        if s.busy:
            load[s.node_id] += 1
    holders = locality_map.holders(task.partition_index) if locality_map else set()

    def rank(entry):
        i, slot = entry
        return (load[slot.node_id], slot.node_id, i)

    local = [e for e in free if e[1].node_id in holders]
    pick = min(local or free, key=rank)
    task.node = pick[1].node_id
    task.slot = pick[0]
    task.non_local = bool(holders) and pick[1].node_id not in holders
    return pick[0]


# -- execution ---------------------------------------------------------------

@dataclass
class PartialEvent:
    job_id: str
    partition_index: int
    frame_start: int
    frame_count: int
    kind: str  # "scan" or "sig"
    data: np.ndarray  # (frame_count, K) or (1, n_pixels) float64


@dataclass
class CompletionEvent:
    job_id: str
    grid: ResultGrid
    non_local_fraction: float
    checksums: list[float]


def execute_job(job: Job, pool, locality_map: LocalityMap | None = None,
                plan: TilingPlan | None = None,
                backend: ReadBackend | str = ReadBackend.MMAP,
                progress=None) -> ResultGrid | None:
    """Run every task, merge partials as they complete, emit each exactly
    once, and return the final grid (None when cancelled).

    The coordinator is a single logical thread: all merging and emission
    happens here, so the grid needs no locking.
    """
    if job.status is JobStatus.CANCELLED:
        return None
    if job.status is not JobStatus.PENDING:
        raise JobStateError(f"job {job.job_id} is {job.status.value}, not pending")
    if job.cancel_requested:
        job.transition(JobStatus.CANCELLED)
        return None
    job.transition(JobStatus.RUNNING)
    if locality_map is None:
        locality_map = LocalityMap.from_descriptor(job.descriptor)

    tasks = plan_tasks(job)
    parts = {p.index: p for p in job.descriptor.partitions}
    grid = ResultGrid(job.descriptor, job.spec)
    pending = deque(tasks)
    running: dict[int, Task] = {}
    non_local = 0
    failure: str | None = None
    cancelled = False

    present = set(pool.node_ids())

    def dispatchable(task: Task) -> bool:
        # A task whose holders are in the pool waits for one of them to
        # free up rather than spilling to a non-holder; only tasks with no
        # surviving holder run remotely.
        holders = locality_map.holders(task.partition_index) & present
        if not holders:
            return True
        free_nodes = {s.node_id for s in pool.slots if not s.busy}
        return bool(holders & free_nodes)

    def dispatch():
        while pending and any(not s.busy for s in pool.slots):
            if cancelled or failure:
                return
            task = next((t for t in pending if dispatchable(t)), None)
            if task is None:
                return  # all pending tasks are waiting on busy holders
            pending.remove(task)
            slot = assign(task, locality_map, pool)
            task.state = "running"
            running[task.partition_index] = task
            pool.submit(slot, job, task, parts[task.partition_index],
                        plan, backend)

    dispatch()
    while running or (pending and not (cancelled or failure)):
        if job.cancel_requested and not cancelled:
            cancelled = True
            pending.clear()
            pool.notify_cancel(job)
        try:
            slot_idx, task, kind, payload = pool.completions.get(timeout=60)
        except queue.Empty:
            raise JobStateError(f"job {job.job_id}: worker timeout")
        pool.mark_free(slot_idx)
        running.pop(task.partition_index, None)
        if kind == "failed":
            failure = failure or f"partition {task.partition_index}: {payload}"
            task.state = "failed"
        elif kind == "cancelled" or (cancelled and kind == "done"):
            task.state = "cancelled"
        else:
            task.state = "done"
            partition = parts[task.partition_index]
            grid.merge_partial(partition, payload)
            non_local += task.non_local
            if progress is not None and not cancelled and not job.cancel_requested:
                progress(PartialEvent(
                    job_id=job.job_id, partition_index=partition.index,
                    frame_start=partition.frame_start,
                    frame_count=partition.frame_count,
                    kind=grid.kind, data=payload))
        dispatch()

    if failure:
        job.error = failure
        job.transition(JobStatus.FAILED)
        raise JobStateError(f"job {job.job_id} failed: {failure}")
    if cancelled or job.cancel_requested:
        job.transition(JobStatus.CANCELLED)
        return None
    job.transition(JobStatus.DONE)
    if progress is not None:
        progress(CompletionEvent(
            job_id=job.job_id, grid=grid,
            non_local_fraction=non_local / max(1, len(tasks)),
            checksums=grid.channel_checksums()))
    return grid


def cancel_job(job: Job) -> None:
    """Request cancellation; running tasks stop at the next tile boundary."""
    if job.status in (JobStatus.DONE, JobStatus.FAILED):
        raise JobStateError(f"job {job.job_id} already finished")
    if job.status is JobStatus.CANCELLED:
        return
    job.request_cancel()
    if job.status is JobStatus.PENDING:
        job.transition(JobStatus.CANCELLED)


def sync_run(dataset_dir, descriptor: DatasetDescriptor, spec: AnalysisSpec,
             workers: int | None = None,
             plan: TilingPlan | None = None,
             backend: ReadBackend | str = ReadBackend.MMAP) -> ResultGrid:
    """Blocking convenience wrapper: run one analysis to completion."""
    pool = InProcessPool(workers=workers)
    try:
        job = Job(descriptor=descriptor, dataset_dir=str(dataset_dir), spec=spec)
        return execute_job(job, pool, plan=plan, backend=backend)
    finally:
        pool.close()


# -- partition auto-sizing and benchmarking ----------------------------------

def calibrate_partition_bytes(time_budget_s: float = DEFAULT_TIME_BUDGET_S,
                              probe_bytes: int = 16 * 1024 * 1024) -> int:
    """Estimate bytes processable within the time budget by timing a single
    mask apply on an in-memory probe tile."""
    from . import codec
    pixels = 16384
    frames = probe_bytes // (pixels * 4)
    tile = np.random.default_rng(0).random((frames, pixels), dtype=np.float32)
    mask = np.ones((1, pixels), dtype=np.float32)
    acc = np.zeros((frames, 1))
    t0 = time.perf_counter()
    codec.apply_mask_stack(tile, mask, acc)
    dt = max(time.perf_counter() - t0, 1e-6)
    # the probe times the kernel alone; reading, decoding, and dispatch
    # share the budget, so derate the measured rate accordingly
    rate = probe_bytes / dt / 4
    target = int(rate * time_budget_s)
    return int(min(max(target, 1024 * 1024), 512 * 1024 * 1024))


def run_benchmark(dataset_dir, descriptor: DatasetDescriptor,
                  spec: AnalysisSpec, backend: ReadBackend | str,
                  worker_counts: list[int], warm: bool = True,
                  plan: TilingPlan | None = None,
                  pool_factory=None) -> dict:
    """Throughput sweep over worker counts; one run per count.

    Reports wall time, MiB/s over the dataset's encoded bytes, first-partial
    latency, and the speedup relative to the single-worker run.
    """
    from . import codec
    backend = ReadBackend(backend)
    total_mib = descriptor.total_bytes / 2**20
    runs = []
    for count in worker_counts:
        if pool_factory is not None:
            pool = pool_factory(count)
        else:
            pool = InProcessPool(workers=count)
        try:
            job = Job(descriptor=descriptor, dataset_dir=str(dataset_dir),
                      spec=spec)
            first_partial = [None]
            t0 = time.perf_counter()

            def on_event(ev, _t0=t0, _fp=first_partial):
                if isinstance(ev, PartialEvent) and _fp[0] is None:
                    _fp[0] = time.perf_counter() - _t0
            execute_job(job, pool, backend=backend, plan=plan,
                        progress=on_event)
            wall = time.perf_counter() - t0
        finally:
            pool.close()
        runs.append({
            "workers": count,
            "wall_s": wall,
            "mib_per_s": total_mib / wall,
            "first_partial_s": first_partial[0],
        })
    base = next((r for r in runs if r["workers"] == 1), runs[0])
    for r in runs:
        r["speedup_vs_1"] = base["wall_s"] / r["wall_s"]
    return {
        "dataset_bytes": descriptor.total_bytes,
        "dtype": descriptor.dtype,
        "backend": backend.value,
        "kernel_backend": codec.kernel_backend(),
        "cache_state": "warm" if warm else "cold",
        "analysis": spec.to_dict(),
        "partitions": len(descriptor.partitions),
        "runs": runs,
    }
