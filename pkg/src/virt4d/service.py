"""HTTP + WebSocket service: datasets, analyses, and progressive job streams.

Long-running work never executes on the request path; jobs run on a
background thread per job and forward events to subscribers.  The wire
format over ``/api/events`` is a JSON text envelope per event, followed
by one binary message holding the partial-result slab (float64
little-endian, C order) for "partial" events::

    {"type": "partial", "job_id", "seq", "partition_index",
     "frame_start", "frame_count", "kind", "shape": [f, k]}
    <binary slab>

    {"type": "complete", "job_id", "seq", "status": "done",
     "partitions", "channels", "scan_shape", "sig_shape",
     "checksums": [...], "non_local_fraction"}

    {"type": "end", "job_id", "seq", "status": "cancelled"|"failed",
     "error"}

``seq`` is strictly increasing per job; checksums are per-channel float64
sums accumulated in emission order so clients can verify stream integrity.
"""

from __future__ import annotations

import asyncio
import hashlib
import os
import queue
import threading
import uuid
from pathlib import Path

import numpy as np
from fastapi import Body, FastAPI, HTTPException, WebSocket, WebSocketDisconnect

from .dataset import parse_sidecar
from .errors import JobStateError, SidecarParseError, ValidationError, Virt4dError
from .executor import (CompletionEvent, InProcessPool, Job, JobStatus,
                       PartialEvent, cancel_job, execute_job)
from .io_engine import ReadBackend, TilingPlan
from .kernels import AnalysisSpec, validate_spec

DEFAULT_GRACE_S = 30.0


class JobHandle:
    """Event log + live subscriber fan-out for one job."""

    def __init__(self, job: Job, grace_s: float):
        self.job = job
        self.grace_s = grace_s
        self.lock = threading.Lock()
        self.events: list[tuple[dict, bytes | None]] = []
        self.subscribers: list[queue.Queue] = []
        self.seq = 0
        self.grid = None
        self.non_local_fraction = 0.0
        self._grace_timer: threading.Timer | None = None

    def emit(self, envelope: dict, payload: bytes | None = None) -> None:
        with self.lock:
            envelope["seq"] = self.seq
            self.seq += 1
            self.events.append((envelope, payload))
            for q in self.subscribers:
                q.put((envelope, payload))

    def subscribe(self) -> queue.Queue:
        with self.lock:
            if self._grace_timer is not None:
                self._grace_timer.cancel()
                self._grace_timer = None
            q: queue.Queue = queue.Queue()
            for item in self.events:  # replay from the merged snapshot
                q.put(item)
            self.subscribers.append(q)
            return q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self.lock:
            if q in self.subscribers:
                self.subscribers.remove(q)
            if not self.subscribers and self.job.status in (
                    JobStatus.PENDING, JobStatus.RUNNING):
                self._grace_timer = threading.Timer(self.grace_s, self._auto_cancel)
                self._grace_timer.daemon = True
                self._grace_timer.start()

    def _auto_cancel(self):
        try:
            cancel_job(self.job)
        except JobStateError:
            pass  # finished in the meantime


class ServiceState:
    def __init__(self, data_root: str | None, workers: int | None,
                 grace_s: float, backend: str | None, tile_bytes: int | None,
                 partition_bytes: int | None):
        self.data_root = data_root
        self.workers = workers
        self.grace_s = grace_s
        self.backend = backend
        self.tile_bytes = tile_bytes
        self.partition_bytes = partition_bytes
        self.lock = threading.Lock()
        self.datasets: dict[str, dict] = {}
        self.analyses: dict[str, dict] = {}
        self.jobs: dict[str, JobHandle] = {}


def _resolve_dataset_path(state: ServiceState, path: str) -> Path:
    p = Path(path).resolve()
    root = state.data_root or os.environ.get("VIRT4D_DATA_ROOT")
    if root:
        root_p = Path(root).resolve()
        if root_p not in (p, *p.parents):
            raise HTTPException(403, f"path outside data root {root_p}")
    return p


def _run_job_thread(state: ServiceState, handle: JobHandle):
    job = handle.job
    pool = InProcessPool(workers=state.workers)
    plan = TilingPlan(state.tile_bytes) if state.tile_bytes else None
    backend = ReadBackend(state.backend) if state.backend else ReadBackend.MMAP

    def progress(ev):
        if isinstance(ev, PartialEvent):
            slab = np.ascontiguousarray(ev.data, dtype="<f8")
            handle.emit({
                "type": "partial", "job_id": job.job_id,
                "partition_index": ev.partition_index,
                "frame_start": ev.frame_start, "frame_count": ev.frame_count,
                "kind": ev.kind, "shape": list(slab.shape),
            }, slab.tobytes())
        elif isinstance(ev, CompletionEvent):
            handle.grid = ev.grid
            handle.non_local_fraction = ev.non_local_fraction
            handle.emit({
                "type": "complete", "job_id": job.job_id, "status": "done",
                "partitions": len(job.descriptor.partitions),
                "channels": list(ev.grid.channels),
                "result_kind": ev.grid.kind,
                "scan_shape": list(job.descriptor.scan_shape),
                "sig_shape": list(job.descriptor.sig_shape),
                "checksums": ev.checksums,
                "non_local_fraction": ev.non_local_fraction,
            })

    try:
        grid = execute_job(job, pool, progress=progress, plan=plan,
                           backend=backend)
        if grid is None:
            handle.emit({"type": "end", "job_id": job.job_id,
                         "status": "cancelled", "error": None})
    except JobStateError as exc:
        handle.emit({"type": "end", "job_id": job.job_id, "status": "failed",
                     "error": str(exc)})
    finally:
        pool.close()


def create_app(data_root: str | None = None, workers: int | None = None,
               grace_s: float = DEFAULT_GRACE_S, backend: str | None = None,
               tile_bytes: int | None = None, partition_bytes: int | None = None,
               ui_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="virt4d")
    state = ServiceState(data_root, workers, grace_s, backend, tile_bytes,
                         partition_bytes)
    app.state.virt4d = state

    def dataset_summary(ds_id: str) -> dict:
        entry = state.datasets[ds_id]
        d = entry["descriptor"]
        return {"dataset_id": ds_id, "path": entry["path"],
                "scan_shape": list(d.scan_shape), "sig_shape": list(d.sig_shape),
                "dtype": d.dtype, "total_frames": d.total_frames,
                "partitions": len(d.partitions),
                "partition_frame_counts": [p.frame_count for p in d.partitions]}

    @app.get("/api/datasets")
    def list_datasets():
        with state.lock:
            return [dataset_summary(i) for i in state.datasets]

    @app.post("/api/datasets/open")
    def open_dataset(body: dict = Body(...)):
        path = _resolve_dataset_path(state, body["path"])
        if path.is_dir():
            sidecar = path / "sidecar.v4d"
        else:
            sidecar = path
        if not sidecar.is_file():
            raise HTTPException(404, f"no sidecar at {sidecar}")
        try:
            meta = parse_sidecar(sidecar)
        except (SidecarParseError, ValidationError) as exc:
            raise HTTPException(422, str(exc))
        ds_id = hashlib.sha1(str(sidecar).encode()).hexdigest()[:12]
        with state.lock:
            state.datasets[ds_id] = {"path": str(sidecar.parent),
                                     "descriptor": meta.descriptor,
                                     "metadata": meta.metadata}
            return dataset_summary(ds_id)

    @app.post("/api/analyses")
    def create_analysis(body: dict = Body(...)):
        ds_id = body.get("dataset_id")
        with state.lock:
            if ds_id not in state.datasets:
                raise HTTPException(404, f"unknown dataset {ds_id}")
            descriptor = state.datasets[ds_id]["descriptor"]
        try:
            spec = AnalysisSpec.from_dict(body.get("spec", {}))
            validate_spec(spec, descriptor)
        except (ValidationError, KeyError) as exc:
            raise HTTPException(422, str(exc))
        analysis_id = uuid.uuid4().hex
        with state.lock:
            state.analyses[analysis_id] = {"dataset_id": ds_id,
                                           "spec": spec.to_dict()}
        return {"analysis_id": analysis_id, "dataset_id": ds_id,
                "spec": spec.to_dict()}

    @app.patch("/api/analyses/{analysis_id}")
    def update_analysis(analysis_id: str, body: dict = Body(...)):
        with state.lock:
            if analysis_id not in state.analyses:
                raise HTTPException(404, f"unknown analysis {analysis_id}")
            entry = state.analyses[analysis_id]
            descriptor = state.datasets[entry["dataset_id"]]["descriptor"]
        try:
            spec = AnalysisSpec.from_dict(body.get("spec", {}))
            validate_spec(spec, descriptor)
        except (ValidationError, KeyError) as exc:
            raise HTTPException(422, str(exc))
        with state.lock:
            entry["spec"] = spec.to_dict()  # atomic replace; jobs snapshotted
        return {"analysis_id": analysis_id, "spec": spec.to_dict()}

    @app.post("/api/jobs")
    def create_job(body: dict = Body(...)):
        analysis_id = body.get("analysis_id")
        with state.lock:
            if analysis_id not in state.analyses:
                raise HTTPException(404, f"unknown analysis {analysis_id}")
            entry = state.analyses[analysis_id]
            ds = state.datasets[entry["dataset_id"]]
            spec = AnalysisSpec.from_dict(entry["spec"])  # snapshot
            job = Job(descriptor=ds["descriptor"], dataset_dir=ds["path"],
                      spec=spec)
            handle = JobHandle(job, state.grace_s)
            state.jobs[job.job_id] = handle
        threading.Thread(target=_run_job_thread, args=(state, handle),
                         daemon=True).start()
        return {"job_id": job.job_id,
                "partitions": len(job.descriptor.partitions)}

    @app.get("/api/jobs/{job_id}")
    def job_status(job_id: str):
        with state.lock:
            if job_id not in state.jobs:
                raise HTTPException(404, f"unknown job {job_id}")
            handle = state.jobs[job_id]
        return {"job_id": job_id, "status": handle.job.status.value,
                "events": handle.seq,
                "non_local_fraction": handle.non_local_fraction,
                "error": handle.job.error}

    @app.delete("/api/jobs/{job_id}")
    def delete_job(job_id: str):
        with state.lock:
            if job_id not in state.jobs:
                raise HTTPException(404, f"unknown job {job_id}")
            handle = state.jobs[job_id]
        try:
            cancel_job(handle.job)
        except JobStateError as exc:
            raise HTTPException(409, str(exc))
        return {"job_id": job_id, "status": handle.job.status.value}

    @app.websocket("/api/events")
    async def events(ws: WebSocket):
        await ws.accept()
        sub: queue.Queue | None = None
        handle: JobHandle | None = None
        try:
            while True:
                msg = await ws.receive_json()
                job_id = msg.get("subscribe")
                with state.lock:
                    handle = state.jobs.get(job_id)
                if handle is None:
                    await ws.send_json({"type": "error",
                                        "error": f"unknown job {job_id}"})
                    continue
                sub = handle.subscribe()
                finished = False
                while not finished:
                    try:
                        envelope, payload = await asyncio.to_thread(
                            sub.get, True, 0.5)
                    except queue.Empty:
                        continue
                    await ws.send_json(envelope)
                    if payload is not None:
                        await ws.send_bytes(payload)
                    finished = envelope["type"] in ("complete", "end")
                handle.unsubscribe(sub)
                sub = None
        except WebSocketDisconnect:
            pass
        finally:
            if handle is not None and sub is not None:
                handle.unsubscribe(sub)

    if ui_dir and Path(ui_dir).is_dir():
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
