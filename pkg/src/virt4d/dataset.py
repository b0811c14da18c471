"""Dataset model, sidecar metadata format, partition planning, and ingest.

Layout on disk: a dataset directory holds one headerless raw binary file
per partition (C-order frames, little-endian) plus a ``sidecar.v4d`` text
file describing shape, dtype, and the partition table.  Paths inside the
sidecar are relative to the sidecar's directory, so datasets relocate
freely.

Sidecar format (UTF-8 text, one ``key: value`` per line)::

    virt4d sidecar
    format_version: 1
    role: dataset
    dtype: float32_le
    scan_shape: 32 32
    sig_shape: 16 16
    partitions:
      <index> <frame_start> <frame_count> <byte_offset> <byte_length> <nodes|-> <file_path>
    meta:
      <key>: <value>

``nodes`` is a comma-separated list of preferred node ids, ``-`` if empty.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import SidecarParseError, ValidationError

DTYPES = ("float32_le", "uint16_le", "uint12_packed_le")

# result grids re-exported as datasets use this extra on-disk dtype
RESULT_DTYPE = "float64_le"
_ALL_DTYPES = DTYPES + (RESULT_DTYPE,)

SIDECAR_NAME = "sidecar.v4d"
SIDECAR_MAGIC = "virt4d sidecar"
FORMAT_VERSION = 1

DEFAULT_PARTITION_BYTES = 256 * 1024 * 1024  # lower end of the 256-512 MiB band

_NUMPY_DTYPES = {"float32_le": np.dtype("<f4"), "uint16_le": np.dtype("<u2")}

_COPY_CHUNK = 8 * 1024 * 1024


def bytes_per_frame(dtype: str, sig_shape) -> int:
    """Byte footprint of one detector frame for the given on-disk dtype."""
    if dtype not in _ALL_DTYPES:
        raise ValidationError(f"unknown dtype {dtype!r}")
    pixels = math.prod(sig_shape)
    if dtype == "float32_le":
        return pixels * 4
    if dtype == "uint16_le":
        return pixels * 2
    if dtype == RESULT_DTYPE:
        return pixels * 8
    if pixels % 2 != 0:
        raise ValidationError(
            f"uint12_packed_le requires an even pixel count, got {pixels}")
    return pixels * 3 // 2


@dataclass(frozen=True)
class Partition:
    """Frame-aligned, byte-addressed unit of work and locality assignment."""

    index: int
    frame_start: int
    frame_count: int
    file_path: str
    byte_offset: int
    byte_length: int
    preferred_nodes: tuple[str, ...] = ()


@dataclass(frozen=True)
class DatasetDescriptor:
    scan_shape: tuple[int, ...]
    sig_shape: tuple[int, ...]
    dtype: str
    partitions: tuple[Partition, ...]
    format_version: int = FORMAT_VERSION

    @property
    def total_frames(self) -> int:
        return math.prod(self.scan_shape)

    @property
    def n_pixels(self) -> int:
        return math.prod(self.sig_shape)

    @property
    def bytes_per_frame(self) -> int:
        return bytes_per_frame(self.dtype, self.sig_shape)

    @property
    def total_bytes(self) -> int:
        return self.total_frames * self.bytes_per_frame

    def numpy_dtype(self) -> np.dtype | None:
        """numpy dtype of the raw stream, or None for packed uint12."""
        return _NUMPY_DTYPES.get(self.dtype)

    def validate(self) -> "DatasetDescriptor":
        """Check every descriptor invariant; return self on success."""
        if self.format_version != FORMAT_VERSION:
            raise SidecarParseError(
                f"unsupported version {self.format_version}")
        if not self.scan_shape or any(s <= 0 for s in self.scan_shape):
            raise ValidationError(f"invalid scan_shape {self.scan_shape}")
        if not self.sig_shape or any(s <= 0 for s in self.sig_shape):
            raise ValidationError(f"invalid sig_shape {self.sig_shape}")
        bpf = self.bytes_per_frame  # raises for odd uint12 pixel counts
        expect_start = 0
        for i, p in enumerate(self.partitions):
            if p.index != i:
                raise ValidationError(
                    f"partition index {p.index} at position {i}: table out of order")
            if p.frame_start != expect_start:
                raise ValidationError(
                    f"partition {i} starts at frame {p.frame_start}, expected "
                    f"{expect_start} (gap or overlap)")
            if p.frame_count < 1:
                raise ValidationError(f"partition {i} has no frames")
            if p.byte_length != p.frame_count * bpf:
                raise ValidationError(
                    f"partition {i} byte_length {p.byte_length} is not "
                    f"frame_count x bytes_per_frame ({p.frame_count} x {bpf})")
            if p.byte_offset % bpf != 0:
                raise ValidationError(
                    f"partition {i} byte_offset {p.byte_offset} not frame-aligned")
            if self.dtype == "uint12_packed_le" and (
                    p.byte_offset % 3 or p.byte_length % 3):
                raise ValidationError(
                    f"partition {i} byte range not 3-byte aligned")
            expect_start += p.frame_count
        if expect_start != self.total_frames:
            raise ValidationError(
                f"partitions cover {expect_start} frames, dataset has "
                f"{self.total_frames}")
        return self


@dataclass
class SidecarMetadata:
    """Parsed sidecar: the descriptor plus free-form key/value metadata."""

    descriptor: DatasetDescriptor
    metadata: dict[str, str] = field(default_factory=dict)
    role: str = "dataset"


def plan_partitions(scan_shape, sig_shape, dtype: str,
                    target_partition_bytes: int = DEFAULT_PARTITION_BYTES,
                    file_template: str = "part-{:05d}.raw") -> tuple[Partition, ...]:
    """Split the frame range into partitions of floor(target/frame) frames.

    All partitions except possibly the last are the same size; each gets
    its own raw file, so byte offsets are zero.
    """
    total_frames = math.prod(scan_shape)
    if total_frames == 0:
        raise ValidationError("empty dataset")
    bpf = bytes_per_frame(dtype, sig_shape)
    if target_partition_bytes < bpf:
        raise ValidationError(
            f"target below frame size: {target_partition_bytes} < {bpf}")
    frames_per_part = max(1, target_partition_bytes // bpf)
    parts = []
    start = 0
    while start < total_frames:
        count = min(frames_per_part, total_frames - start)
        parts.append(Partition(
            index=len(parts), frame_start=start, frame_count=count,
            file_path=file_template.format(len(parts)),
            byte_offset=0, byte_length=count * bpf))
        start += count
    return tuple(parts)


def make_descriptor(scan_shape, sig_shape, dtype: str,
                    target_partition_bytes: int = DEFAULT_PARTITION_BYTES,
                    ) -> DatasetDescriptor:
    parts = plan_partitions(scan_shape, sig_shape, dtype, target_partition_bytes)
    return DatasetDescriptor(
        scan_shape=tuple(scan_shape), sig_shape=tuple(sig_shape),
        dtype=dtype, partitions=parts).validate()


# -- sidecar serialization ---------------------------------------------------

def dumps_sidecar(descriptor: DatasetDescriptor,
                  extra_metadata: dict | None = None,
                  role: str = "dataset") -> str:
    """Serialize descriptor + metadata to sidecar text; invariants are
    checked first."""
    descriptor.validate()
    lines = [
        SIDECAR_MAGIC,
        f"format_version: {descriptor.format_version}",
        f"role: {role}",
        f"dtype: {descriptor.dtype}",
        "scan_shape: " + " ".join(str(s) for s in descriptor.scan_shape),
        "sig_shape: " + " ".join(str(s) for s in descriptor.sig_shape),
        "partitions:",
    ]
    for p in descriptor.partitions:
        nodes = ",".join(p.preferred_nodes) if p.preferred_nodes else "-"
        lines.append(f"  {p.index} {p.frame_start} {p.frame_count} "
                     f"{p.byte_offset} {p.byte_length} {nodes} {p.file_path}")
    lines.append("meta:")
    for key, value in (extra_metadata or {}).items():
        if "\n" in str(value) or ":" in key:
            raise ValidationError(f"metadata key/value not representable: {key!r}")
        lines.append(f"  {key}: {value}")
    return "\n".join(lines) + "\n"


def write_sidecar(descriptor: DatasetDescriptor, extra_metadata: dict | None,
                  path, role: str = "dataset") -> None:
    Path(path).write_text(dumps_sidecar(descriptor, extra_metadata, role),
                          encoding="utf-8")


def _parse_int(token: str, lineno: int, what: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise SidecarParseError(
            f"line {lineno}: {what} is not an integer: {token!r}") from None


def loads_sidecar(text: str) -> SidecarMetadata:
    """Parse and fully validate sidecar text; never returns a partial
    descriptor."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != SIDECAR_MAGIC:
        raise SidecarParseError(f"line 1: missing '{SIDECAR_MAGIC}' header")

    fields: dict[str, str] = {}
    partitions: list[Partition] = []
    metadata: dict[str, str] = {}
    section = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("  "):
            if section == "partitions":
                toks = line.split(maxsplit=6)
                if len(toks) != 7:
                    raise SidecarParseError(
                        f"line {lineno}: partition row needs 7 fields, got {len(toks)}")
                nodes = () if toks[5] == "-" else tuple(toks[5].split(","))
                partitions.append(Partition(
                    index=_parse_int(toks[0], lineno, "index"),
                    frame_start=_parse_int(toks[1], lineno, "frame_start"),
                    frame_count=_parse_int(toks[2], lineno, "frame_count"),
                    byte_offset=_parse_int(toks[3], lineno, "byte_offset"),
                    byte_length=_parse_int(toks[4], lineno, "byte_length"),
                    preferred_nodes=nodes, file_path=toks[6]))
            elif section == "meta":
                key, sep, value = line.strip().partition(":")
                if not sep:
                    raise SidecarParseError(f"line {lineno}: metadata row without ':'")
                metadata[key.strip()] = value.strip()
            else:
                raise SidecarParseError(f"line {lineno}: unexpected indented line")
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise SidecarParseError(f"line {lineno}: expected 'key: value'")
        key, value = key.strip(), value.strip()
        if key in ("partitions", "meta"):
            section = key
        else:
            section = None
            fields[key] = value

    for required in ("format_version", "dtype", "scan_shape", "sig_shape"):
        if required not in fields:
            raise SidecarParseError(f"missing field '{required}'")
    version = _parse_int(fields["format_version"], 0, "format_version")
    if version != FORMAT_VERSION:
        raise SidecarParseError(f"unsupported version {version}")
    if fields["dtype"] not in _ALL_DTYPES:
        raise SidecarParseError(f"unknown dtype {fields['dtype']!r}")

    descriptor = DatasetDescriptor(
        scan_shape=tuple(int(s) for s in fields["scan_shape"].split()),
        sig_shape=tuple(int(s) for s in fields["sig_shape"].split()),
        dtype=fields["dtype"], partitions=tuple(partitions),
        format_version=version)
    descriptor.validate()
    return SidecarMetadata(descriptor=descriptor, metadata=metadata,
                           role=fields.get("role", "dataset"))


def parse_sidecar(path) -> SidecarMetadata:
    return loads_sidecar(Path(path).read_text(encoding="utf-8"))


def load_dataset(path) -> tuple[DatasetDescriptor, Path]:
    """Resolve a dataset directory or sidecar path to (descriptor, dataset_dir)."""
    p = Path(path)
    if p.is_dir():
        p = p / SIDECAR_NAME
    if not p.is_file():
        raise FileNotFoundError(f"no sidecar at {p}")
    return parse_sidecar(p).descriptor, p.parent


# -- ingest ------------------------------------------------------------------

def ingest(source_path, source_layout: str, scan_shape, sig_shape, output_dir,
           target_partition_bytes: int = DEFAULT_PARTITION_BYTES,
           extra_metadata: dict | None = None) -> DatasetDescriptor:
    """Split a contiguous raw source file into the partitioned layout.

    The concatenation of the partition files is byte-identical to the
    source; a sidecar is written alongside them.
    """
    if source_layout not in DTYPES:
        raise ValidationError(f"unsupported source layout {source_layout!r}")
    descriptor = make_descriptor(scan_shape, sig_shape, source_layout,
                                 target_partition_bytes)
    src_size = os.path.getsize(source_path)
    if src_size != descriptor.total_bytes:
        raise ValidationError(
            f"size mismatch: source is {src_size} bytes, "
            f"{descriptor.total_frames} frames x {descriptor.bytes_per_frame} "
            f"B/frame = {descriptor.total_bytes} bytes")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(source_path, "rb") as src:
        for part in descriptor.partitions:
            with open(out / part.file_path, "wb") as dst:
                remaining = part.byte_length
                while remaining:
                    chunk = src.read(min(_COPY_CHUNK, remaining))
                    if not chunk:
                        raise ValidationError("source shrank during ingest")
                    dst.write(chunk)
                    remaining -= len(chunk)
    write_sidecar(descriptor, extra_metadata, out / SIDECAR_NAME)
    return descriptor


def generate_synthetic(base_path, tile_repeats: int, output_dir,
                       target_partition_bytes: int = DEFAULT_PARTITION_BYTES,
                       ) -> DatasetDescriptor:
    """Tile an ingested dataset along the slow scan axis to reach bench sizes.

    Frame i of the output equals base frame (i mod base_total_frames).
    """
    if tile_repeats < 1:
        raise ValidationError("tile_repeats must be >= 1")
    base, base_dir = load_dataset(base_path)
    scan_shape = (base.scan_shape[0] * tile_repeats,) + tuple(base.scan_shape[1:])
    descriptor = make_descriptor(scan_shape, base.sig_shape, base.dtype,
                                 target_partition_bytes)

    base_bytes = bytearray(base.total_bytes)
    pos = 0
    for part in base.partitions:
        with open(base_dir / part.file_path, "rb") as f:
            f.seek(part.byte_offset)
            view = memoryview(base_bytes)[pos:pos + part.byte_length]
            if f.readinto(view) != part.byte_length:
                raise ValidationError(f"base partition {part.index} truncated")
        pos += part.byte_length
    period = len(base_bytes)

    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for part in descriptor.partitions:
        with open(out / part.file_path, "wb") as dst:
            # absolute byte position in the virtual repeated stream
            abs_pos = part.frame_start * descriptor.bytes_per_frame
            remaining = part.byte_length
            while remaining:
                off = abs_pos % period
                n = min(remaining, period - off, _COPY_CHUNK)
                dst.write(memoryview(base_bytes)[off:off + n])
                abs_pos += n
                remaining -= n
    write_sidecar(descriptor, {"synthetic_tiled_from": str(base_path),
                               "tile_repeats": str(tile_repeats)},
                  out / SIDECAR_NAME)
    return descriptor


def replace_partition_nodes(descriptor: DatasetDescriptor,
                            nodes_by_partition) -> DatasetDescriptor:
    """Return a copy with preferred_nodes set per partition index."""
    parts = tuple(
        replace(p, preferred_nodes=tuple(nodes_by_partition.get(p.index, ())))
        for p in descriptor.partitions)
    return replace(descriptor, partitions=parts)
