"""Export result grids as datasets: headerless float64 raw files plus the
standard sidecar schema with role "result".

Mapping: each channel becomes one "frame" whose sig_shape is the original
scan grid (or detector shape for sum/pick results), one partition and one
raw file per channel.  Channel labels are recorded in the sidecar metadata,
so results round-trip through the normal dataset loader.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import (RESULT_DTYPE, SIDECAR_NAME, DatasetDescriptor,
                      Partition, write_sidecar)
from .errors import ValidationError
from .kernels import ResultGrid


def export_result_grid(grid: ResultGrid, output_dir,
                       extra_metadata: dict | None = None) -> DatasetDescriptor:
    if not grid.complete:
        raise ValidationError("cannot export an incomplete result grid")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if grid.kind == "scan":
        sig_shape = grid.descriptor.scan_shape
        images = grid.scan_images()
    else:
        sig_shape = grid.descriptor.sig_shape
        images = {grid.channels[0]: grid.sig_image()}

    frame_bytes = int(np.prod(sig_shape)) * 8
    parts = []
    for i, (label, image) in enumerate(images.items()):
        file_name = f"channel-{i:02d}-{label}.raw"
        np.ascontiguousarray(image, dtype="<f8").tofile(out / file_name)
        parts.append(Partition(index=i, frame_start=i, frame_count=1,
                               file_path=file_name, byte_offset=0,
                               byte_length=frame_bytes))
    descriptor = DatasetDescriptor(
        scan_shape=(len(images),), sig_shape=tuple(sig_shape),
        dtype=RESULT_DTYPE, partitions=tuple(parts))
    meta = {"channels": " ".join(images), "result_kind": grid.kind}
    meta.update(extra_metadata or {})
    write_sidecar(descriptor, meta, out / SIDECAR_NAME, role="result")
    return descriptor


def load_result_grid(path) -> dict[str, np.ndarray]:
    """Read an exported result back as {channel label: float64 image}."""
    from .dataset import load_dataset, parse_sidecar
    descriptor, base = load_dataset(path)
    meta = parse_sidecar(base / SIDECAR_NAME)
    if meta.role != "result" or descriptor.dtype != RESULT_DTYPE:
        raise ValidationError(f"{path} is not an exported result")
    labels = meta.metadata.get("channels", "").split()
    out = {}
    for part, label in zip(descriptor.partitions, labels):
        data = np.fromfile(base / part.file_path, dtype="<f8")
        out[label] = data.reshape(descriptor.sig_shape)
    return out
