"""Partition readers (mmap / buffered / direct IO) and the tile iterator.

All backends produce byte-identical data for the same partition.  The
tile iterator yields cache-sized float32 tiles; tile payloads may be
views into reused or mapped buffers and are only valid until the next
tile is produced.
"""

from __future__ import annotations

import enum
import math
import mmap
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

import psutil

from . import codec
from .dataset import DatasetDescriptor, Partition
from .errors import BackendUnsupportedError, TruncatedPartitionError

DIRECT_IO_ALIGN = 4096
DEFAULT_TILE_BYTES = 1024 * 1024  # ~L3-friendly


class ReadBackend(str, enum.Enum):
    MMAP = "mmap"
    BUFFERED = "buffered"
    DIRECT = "direct"


@dataclass(frozen=True)
class TilingPlan:
    tile_target_bytes: int = DEFAULT_TILE_BYTES

    def mode(self, descriptor: DatasetDescriptor) -> str:
        if descriptor.bytes_per_frame <= self.tile_target_bytes:
            return "whole-frames"
        return "row-slabs"


@dataclass
class Tile:
    """A contiguous run of decoded frame data.

    ``data`` has shape (frame_count, pixels); for row-slab tiles
    frame_count is 1 and pixels covers rows [row_start, row_start+row_count).
    """

    partition_index: int
    frame_start: int
    frame_count: int
    row_start: int
    row_count: int
    data: np.ndarray
    byte_provenance: tuple[str, int, int]  # (file, offset, length)


# -- read backends -----------------------------------------------------------

class _MmapReader:
    """Zero-copy: exposes slices of the mapped file directly."""

    def __init__(self, path: Path):
        self._f = open(path, "rb")
        self._map = mmap.mmap(self._f.fileno(), 0, access=mmap.ACCESS_READ)
        self._view = memoryview(self._map)

    def read(self, offset: int, length: int):
        if offset + length > len(self._map):
            raise TruncatedPartitionError(
                f"{self._f.name}: need {offset + length} bytes, file has {len(self._map)}")
        return self._view[offset:offset + length]

    def close(self):
        self._view.release()
        try:
            self._map.close()
        except BufferError:
            pass  # zero-copy tiles still referenced; unmapped when GC'd
        self._f.close()


class _BufferedReader:
    """Sequential reads into one reusable tile buffer."""

    def __init__(self, path: Path):
        self._f = open(path, "rb", buffering=0)
        self._buf = bytearray()

    def read(self, offset: int, length: int):
        if len(self._buf) < length:
            self._buf = bytearray(length)
        view = memoryview(self._buf)[:length]
        self._f.seek(offset)
        got = self._f.readinto(view)
        if got != length:
            raise TruncatedPartitionError(
                f"{self._f.name}: short read, wanted {length} got {got}")
        return view

    def close(self):
        self._f.close()


class _DirectReader:
    """Cache-bypassing reads; unaligned requests are over-read and trimmed."""

    def __init__(self, path: Path):
        try:
            self._fd = os.open(path, os.O_RDONLY | os.O_DIRECT)
        except OSError as exc:
            raise BackendUnsupportedError(
                f"direct IO unavailable for {path} ({exc.strerror}); "
                "use the buffered backend instead") from exc
        self._path = str(path)
        self._buf = mmap.mmap(-1, DIRECT_IO_ALIGN)  # page-aligned scratch

    def read(self, offset: int, length: int):
        start = offset - offset % DIRECT_IO_ALIGN
        skirt = offset - start
        need = skirt + length
        aligned = -(-need // DIRECT_IO_ALIGN) * DIRECT_IO_ALIGN
        if len(self._buf) < aligned:
            self._close_buf()
            self._buf = mmap.mmap(-1, aligned)
        view = memoryview(self._buf)
        got = os.preadv(self._fd, [view[:aligned]], start)
        if got < need:  # short reads only legal at EOF
            raise TruncatedPartitionError(
                f"{self._path}: short direct read, wanted {need} got {got}")
        return view[skirt:skirt + length]

    def _close_buf(self):
        try:
            self._buf.close()
        except BufferError:
            pass  # tile views still referenced; freed when GC'd

    def close(self):
        self._close_buf()
        os.close(self._fd)


_READERS = {
    ReadBackend.MMAP: _MmapReader,
    ReadBackend.BUFFERED: _BufferedReader,
    ReadBackend.DIRECT: _DirectReader,
}


def read_backend_open(dataset_dir, partition: Partition,
                      backend: ReadBackend | str):
    """Open the partition's file with the requested backend.

    Direct IO raises :class:`BackendUnsupportedError` when the filesystem
    rejects it; there is never a silent fallback.
    """
    backend = ReadBackend(backend)
    path = Path(dataset_dir) / partition.file_path
    if not path.is_file():
        raise IOError(f"partition {partition.index}: missing file {path}")
    return _READERS[backend](path)


def direct_io_supported(dataset_dir) -> bool:
    probe = Path(dataset_dir) / ".direct-probe"
    try:
        with open(probe, "wb") as f:
            f.write(b"\0" * DIRECT_IO_ALIGN)
        fd = os.open(probe, os.O_RDONLY | os.O_DIRECT)
        os.close(fd)
        return True
    except OSError:
        return False
    finally:
        probe.unlink(missing_ok=True)


def auto_backend(descriptor: DatasetDescriptor, dataset_dir) -> ReadBackend:
    """mmap when a partition fits in memory comfortably, direct when the
    dataset exceeds physical memory, buffered otherwise."""
    mem = psutil.virtual_memory()
    part_bytes = max(p.byte_length for p in descriptor.partitions)
    if descriptor.total_bytes > mem.total and direct_io_supported(dataset_dir):
        return ReadBackend.DIRECT
    if part_bytes <= mem.available // 2:
        return ReadBackend.MMAP
    return ReadBackend.BUFFERED


# -- tiling ------------------------------------------------------------------

def _row_geometry(descriptor: DatasetDescriptor):
    rows = descriptor.sig_shape[0]
    row_pixels = math.prod(descriptor.sig_shape[1:]) if len(descriptor.sig_shape) > 1 else 1
    return rows, row_pixels


def _pixel_bytes(descriptor: DatasetDescriptor, pixels: int) -> int:
    if descriptor.dtype == "float32_le":
        return pixels * 4
    if descriptor.dtype == "uint16_le":
        return pixels * 2
    if descriptor.dtype == "float64_le":
        return pixels * 8
    assert pixels % 2 == 0
    return pixels * 3 // 2


def plan_tile_spans(descriptor: DatasetDescriptor, partition: Partition,
                    plan: TilingPlan):
    """Yield (frame_start_abs, frame_count, row_start, row_count) spans."""
    if plan.mode(descriptor) == "whole-frames":
        per_tile = max(1, plan.tile_target_bytes // descriptor.bytes_per_frame)
        rows, _ = _row_geometry(descriptor)
        start = partition.frame_start
        end = partition.frame_start + partition.frame_count
        while start < end:
            count = min(per_tile, end - start)
            yield (start, count, 0, rows)
            start += count
    else:
        rows, row_pixels = _row_geometry(descriptor)
        if descriptor.dtype == "uint12_packed_le" and row_pixels % 2:
            # odd pixels per row: slabs must span an even number of rows
            per_slab = max(2, (plan.tile_target_bytes * 2 // (row_pixels * 3)) & ~1)
        else:
            per_slab = max(1, plan.tile_target_bytes
                           // _pixel_bytes(descriptor, row_pixels))
        for frame in range(partition.frame_start,
                           partition.frame_start + partition.frame_count):
            row = 0
            while row < rows:
                count = min(per_slab, rows - row)
                yield (frame, 1, row, count)
                row += count


def tile_iterator(dataset_dir, descriptor: DatasetDescriptor,
                  partition: Partition, plan: TilingPlan | None = None,
                  backend: ReadBackend | str = ReadBackend.MMAP):
    """Stream the partition as decoded float32 tiles in ascending order."""
    plan = plan or TilingPlan()
    reader = read_backend_open(dataset_dir, partition, backend)
    _, row_pixels = _row_geometry(descriptor)
    scratch = None  # reused decode target for non-float32 dtypes
    try:
        for frame_start, frame_count, row_start, row_count in \
                plan_tile_spans(descriptor, partition, plan):
            pixels = row_count * row_pixels if frame_count == 1 else descriptor.n_pixels
            n_values = frame_count * pixels
            frame_rel = frame_start - partition.frame_start
            offset = (partition.byte_offset
                      + frame_rel * descriptor.bytes_per_frame
                      + _pixel_bytes(descriptor, row_start * row_pixels))
            length = _pixel_bytes(descriptor, n_values)
            raw = reader.read(offset, length)
            if descriptor.dtype == "float32_le":
                data = np.frombuffer(raw, dtype="<f4")
            elif descriptor.dtype == "uint16_le":
                data = np.frombuffer(raw, dtype="<u2").astype(np.float32)
            elif descriptor.dtype == "float64_le":
                data = np.frombuffer(raw, dtype="<f8").astype(np.float32)
            else:
                if scratch is None or scratch.shape[0] < n_values:
                    scratch = np.empty(n_values, dtype=np.float32)
                codec.decode_uint12_le_f32(raw, scratch[:n_values])
                data = scratch[:n_values]
            yield Tile(
                partition_index=partition.index,
                frame_start=frame_start, frame_count=frame_count,
                row_start=row_start, row_count=row_count,
                data=data.reshape(frame_count, pixels),
                byte_provenance=(partition.file_path, offset, length))
    finally:
        reader.close()
