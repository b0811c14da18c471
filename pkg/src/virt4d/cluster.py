"""Multi-process worker backend over a local socket protocol.

Simulates a cluster on one machine: each worker process belongs to a
named node and prefers that node's private data directory (the
short-circuit-read analogue); partitions absent locally are read from
the shared dataset directory, which stands in for a remote fetch.

Wire protocol (byte-exact, so alternate-language workers interoperate)::

    message   = header_len payload_len header payload
    header_len  : uint32 little-endian, byte length of ``header``
    payload_len : uint32 little-endian, byte length of ``payload``
    header      : UTF-8 JSON object with a "type" field
    payload     : raw bytes (float64 little-endian C-order slab for
                  "partial" messages, empty otherwise)

Header types:
  {"type": "hello", "node": str, "slot": int}             worker -> coord
  {"type": "task", "job_id", "partition_index", "sidecar",
   "spec", "tile_bytes", "backend", "dataset_dir"}        coord -> worker
  {"type": "cancel", "job_id"}                            coord -> worker
  {"type": "shutdown"}                                    coord -> worker
  {"type": "partial", "job_id", "partition_index",
   "kind": "done"|"cancelled"|"failed",
   "shape": [f, k], "error": str|null}                    worker -> coord
"""

from __future__ import annotations

import json
import multiprocessing
import queue
import select
import shutil
import socket
import struct
import threading
from pathlib import Path

import numpy as np

from .dataset import SIDECAR_NAME, dumps_sidecar, loads_sidecar
from .errors import SchedulingError
from .executor import WorkerSlot
from .io_engine import TilingPlan
from .kernels import AnalysisSpec, run_partition_task

_LEN = struct.Struct("<II")


def send_msg(sock: socket.socket, header: dict, payload: bytes = b"") -> None:
    raw = json.dumps(header).encode()
    sock.sendall(_LEN.pack(len(raw), len(payload)) + raw + payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed")
        buf.extend(chunk)
    return bytes(buf)


def recv_msg(sock: socket.socket):
    hlen, plen = _LEN.unpack(_recv_exact(sock, _LEN.size))
    header = json.loads(_recv_exact(sock, hlen))
    payload = _recv_exact(sock, plen) if plen else b""
    return header, payload


# -- worker side -------------------------------------------------------------

def _drain_control(sock: socket.socket, cancelled: set[str]) -> None:
    """Consume any queued cancel messages without blocking."""
    while select.select([sock], [], [], 0)[0]:
        header, _ = recv_msg(sock)
        if header["type"] == "cancel":
            cancelled.add(header["job_id"])
        elif header["type"] == "shutdown":
            raise SystemExit(0)


def worker_main(host: str, port: int, node_id: str, slot: int,
                local_dir: str | None) -> None:
    """Entry point of one worker process (one per core in production)."""
    sock = socket.create_connection((host, port))
    send_msg(sock, {"type": "hello", "node": node_id, "slot": slot})
    cancelled: set[str] = set()
    while True:
        header, _ = recv_msg(sock)
        mtype = header["type"]
        if mtype == "shutdown":
            return
        if mtype == "cancel":
            cancelled.add(header["job_id"])
            continue
        assert mtype == "task", mtype
        job_id = header["job_id"]
        descriptor = loads_sidecar(header["sidecar"]).descriptor
        partition = descriptor.partitions[header["partition_index"]]
        spec = AnalysisSpec.from_dict(header["spec"])
        data_dir = header["dataset_dir"]
        if local_dir and (Path(local_dir) / partition.file_path).is_file():
            data_dir = local_dir  # short-circuit read from the local replica

        def cancel_check():
            _drain_control(sock, cancelled)
            return job_id in cancelled

        reply = {"type": "partial", "job_id": job_id,
                 "partition_index": partition.index, "error": None}
        try:
            if job_id in cancelled:
                partial = None
            else:
                partial = run_partition_task(
                    data_dir, descriptor, partition, spec,
                    plan=TilingPlan(header["tile_bytes"]),
                    backend=header["backend"], cancel_check=cancel_check)
        except Exception as exc:
            reply.update(kind="failed", shape=[], error=str(exc))
            send_msg(sock, reply)
            continue
        if partial is None:
            reply.update(kind="cancelled", shape=[])
            send_msg(sock, reply)
        else:
            slab = np.ascontiguousarray(partial, dtype="<f8")
            reply.update(kind="done", shape=list(slab.shape))
            send_msg(sock, reply, slab.tobytes())


# -- coordinator side --------------------------------------------------------

class ProcessWorkerPool:
    """Worker-per-process pool satisfying the executor's pool contract.

    ``nodes`` maps node id -> private data directory (or None); each node
    gets ``slots_per_node`` worker processes.
    """

    def __init__(self, nodes: dict[str, str | None], slots_per_node: int = 1):
        if not nodes or slots_per_node < 1:
            raise SchedulingError("empty pool")
        self.completions: queue.Queue = queue.Queue()
        self.slots: list[WorkerSlot] = []
        self._conns: list[socket.socket] = []
        self._current: list = []
        self._procs: list[multiprocessing.Process] = []
        self._threads: list[threading.Thread] = []

        server = socket.socket()
        server.bind(("127.0.0.1", 0))
        server.listen(len(nodes) * slots_per_node)
        host, port = server.getsockname()

        ctx = multiprocessing.get_context("fork")
        for node_id in sorted(nodes):
            for slot in range(slots_per_node):
                p = ctx.Process(
                    target=worker_main,
                    args=(host, port, node_id, slot, nodes[node_id]),
                    daemon=True)
                p.start()
                self._procs.append(p)
        by_key = {}
        for _ in self._procs:
            conn, _addr = server.accept()
            header, _ = recv_msg(conn)
            assert header["type"] == "hello"
            by_key[(header["node"], header["slot"])] = conn
        server.close()
        for node_id in sorted(nodes):
            for slot in range(slots_per_node):
                self.slots.append(WorkerSlot(node_id, slot))
                self._conns.append(by_key[(node_id, slot)])
                self._current.append(None)
        for idx, conn in enumerate(self._conns):
            t = threading.Thread(target=self._recv_loop, args=(idx, conn),
                                 daemon=True)
            t.start()
            self._threads.append(t)

    def node_ids(self) -> list[str]:
        return sorted({s.node_id for s in self.slots})

    def _recv_loop(self, idx: int, conn: socket.socket):
        while True:
            try:
                header, payload = recv_msg(conn)
            except (ConnectionError, OSError):
                return
            if header["type"] != "partial":
                continue
            task = self._current[idx]
            kind = header["kind"]
            if kind == "done":
                data = np.frombuffer(payload, dtype="<f8").reshape(
                    header["shape"]).copy()
            elif kind == "failed":
                data = header["error"]
            else:
                data = None
            self.completions.put((idx, task, kind, data))

    def submit(self, slot_idx: int, job, task, partition, plan, backend) -> None:
        self.slots[slot_idx].busy = True
        self._current[slot_idx] = task
        plan = plan or TilingPlan()
        send_msg(self._conns[slot_idx], {
            "type": "task", "job_id": job.job_id,
            "partition_index": partition.index,
            "sidecar": dumps_sidecar(job.descriptor),
            "spec": job.spec.to_dict(),
            "tile_bytes": plan.tile_target_bytes,
            "backend": str(getattr(backend, "value", backend)),
            "dataset_dir": str(job.dataset_dir),
        })

    def mark_free(self, slot_idx: int) -> None:
        self.slots[slot_idx].busy = False

    def notify_cancel(self, job) -> None:
        for conn in self._conns:
            try:
                send_msg(conn, {"type": "cancel", "job_id": job.job_id})
            except OSError:
                pass

    def close(self):
        for conn in self._conns:
            try:
                send_msg(conn, {"type": "shutdown"})
                conn.close()
            except OSError:
                pass
        for p in self._procs:
            p.join(timeout=5)
            if p.is_alive():
                p.terminate()


def replicate_dataset(dataset_dir, node_dirs: dict[str, str],
                      holders: dict[int, set[str]]) -> None:
    """Copy each partition's raw file into its holder nodes' directories."""
    from .dataset import load_dataset
    descriptor, src = load_dataset(dataset_dir)
    for node_id, ndir in node_dirs.items():
        Path(ndir).mkdir(parents=True, exist_ok=True)
    for part in descriptor.partitions:
        for node_id in holders.get(part.index, ()):
            dst = Path(node_dirs[node_id]) / part.file_path
            dst.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(src / part.file_path, dst)
