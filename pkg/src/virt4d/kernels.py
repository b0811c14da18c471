"""Mask generation and the map-reduce core of the virtual-detector engine.

Frames and masks are flattened to vectors; applying a mask stack to a
tile is a frame-stack x mask-stack multiplication whose partial sums are
associative, so partitions can be processed in any order and merged into
the result grid as they complete.

Conventions: detector origin at the top-left, x = column, y = row, pixel
centers at integer coordinates.  Binary masks use pixel-center inclusion
with no anti-aliasing; geometry outside the frame is clipped naturally by
the inclusion predicate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import codec
from .dataset import DatasetDescriptor, Partition
from .errors import ValidationError
from .io_engine import ReadBackend, Tile, TilingPlan, tile_iterator


# -- mask construction -------------------------------------------------------

def _pixel_grid(sig_shape):
    if len(sig_shape) != 2:
        raise ValidationError(f"geometric masks need a 2D sig_shape, got {sig_shape}")
    h, w = sig_shape
    y, x = np.mgrid[0:h, 0:w]
    return x, y


def make_disk_mask(sig_shape, cx: float, cy: float, r: float) -> np.ndarray:
    """1.0 where (x-cx)^2 + (y-cy)^2 <= r^2, else 0.0."""
    if r < 0:
        raise ValidationError("disk radius must be >= 0")
    x, y = _pixel_grid(sig_shape)
    d2 = (x - cx) ** 2 + (y - cy) ** 2
    return (d2 <= r * r).astype(np.float32)


def make_ring_mask(sig_shape, cx: float, cy: float,
                   r_inner: float, r_outer: float) -> np.ndarray:
    """1.0 where r_inner^2 < d^2 <= r_outer^2.

    r_inner == 0 additionally includes d == 0, so ring(0, r) == disk(r).
    """
    if r_inner < 0 or r_inner > r_outer:
        raise ValidationError(
            f"invalid ring radii: inner {r_inner}, outer {r_outer}")
    x, y = _pixel_grid(sig_shape)
    d2 = (x - cx) ** 2 + (y - cy) ** 2
    inside = (d2 > r_inner * r_inner) & (d2 <= r_outer * r_outer)
    if r_inner == 0:
        inside |= d2 == 0
    return inside.astype(np.float32)


def make_point_mask(sig_shape, px: int, py: int) -> np.ndarray:
    mask = np.zeros(sig_shape, dtype=np.float32)
    if 0 <= py < sig_shape[0] and 0 <= px < sig_shape[1]:
        mask[py, px] = 1.0
    return mask


def make_com_masks(sig_shape) -> "MaskStack":
    """Channels (sum, x-weighted, y-weighted) for center-of-mass analysis."""
    x, y = _pixel_grid(sig_shape)
    ones = np.ones(sig_shape, dtype=np.float32)
    return MaskStack.from_masks(
        sig_shape,
        [ones, x.astype(np.float32), y.astype(np.float32)],
        labels=["sum", "wx", "wy"])


@dataclass
class MaskStack:
    """K flattened masks: the (tall-and-skinny, transposed) right-hand matrix."""

    sig_shape: tuple[int, ...]
    data: np.ndarray  # (K, n_pixels) float32, C-contiguous
    labels: tuple[str, ...]

    @classmethod
    def from_masks(cls, sig_shape, masks: Iterable[np.ndarray],
                   labels: Iterable[str] | None = None) -> "MaskStack":
        flat = [np.ascontiguousarray(m, dtype=np.float32).reshape(-1) for m in masks]
        n_pixels = math.prod(sig_shape)
        for m in flat:
            if m.shape[0] != n_pixels:
                raise ValidationError(
                    f"mask has {m.shape[0]} pixels, sig_shape needs {n_pixels}")
        data = np.ascontiguousarray(np.stack(flat))
        labels = tuple(labels) if labels else tuple(
            f"channel{i}" for i in range(data.shape[0]))
        if len(labels) != data.shape[0]:
            raise ValidationError("one label per mask required")
        return cls(tuple(sig_shape), data, labels)

    @property
    def k(self) -> int:
        return self.data.shape[0]


# -- analysis specification --------------------------------------------------

VARIANTS = ("mask_apply", "sum_frames", "pick_frame", "com")


@dataclass(frozen=True)
class AnalysisSpec:
    """Abstract description of one analysis; immutable so jobs can snapshot it.

    ``masks``: for mask_apply, a tuple of geometry dicts, each one of
      {"kind": "disk", "cx", "cy", "r"}
      {"kind": "ring", "cx", "cy", "r_inner", "r_outer"}
      {"kind": "point", "px", "py"}
    ``frame``: scan position (flat index) for pick_frame.
    ``roi``: optional disk dict restricting com to a detector region.
    """

    variant: str
    masks: tuple = ()
    frame: int = 0
    roi: dict | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown analysis variant {self.variant!r}")
        if self.variant == "mask_apply" and not self.masks:
            raise ValidationError("mask_apply needs at least one mask")

    @classmethod
    def from_dict(cls, d: dict) -> "AnalysisSpec":
        return cls(variant=d.get("variant", ""),
                   masks=tuple(dict(m) for m in d.get("masks", ())),
                   frame=int(d.get("frame", 0)),
                   roi=dict(d["roi"]) if d.get("roi") else None)

    def to_dict(self) -> dict:
        out = {"variant": self.variant}
        if self.masks:
            out["masks"] = [dict(m) for m in self.masks]
        if self.variant == "pick_frame":
            out["frame"] = self.frame
        if self.roi:
            out["roi"] = dict(self.roi)
        return out


def _mask_from_geometry(sig_shape, geom: dict) -> np.ndarray:
    kind = geom.get("kind")
    if kind == "disk":
        return make_disk_mask(sig_shape, geom["cx"], geom["cy"], geom["r"])
    if kind == "ring":
        return make_ring_mask(sig_shape, geom["cx"], geom["cy"],
                              geom["r_inner"], geom["r_outer"])
    if kind == "point":
        return make_point_mask(sig_shape, geom["px"], geom["py"])
    if kind == "random":  # bench: single random mask
        rng = np.random.default_rng(int(geom.get("seed", 0)))
        return rng.random(sig_shape, dtype=np.float32)
    raise ValidationError(f"unknown mask kind {kind!r}")


def build_mask_stack(spec: AnalysisSpec, sig_shape) -> MaskStack | None:
    """The mask stack an analysis needs, or None for pixelwise variants."""
    if spec.variant == "mask_apply":
        masks = [_mask_from_geometry(sig_shape, g) for g in spec.masks]
        labels = [g.get("label", f"{g.get('kind')}{i}")
                  for i, g in enumerate(spec.masks)]
        return MaskStack.from_masks(sig_shape, masks, labels)
    if spec.variant == "com":
        stack = make_com_masks(sig_shape)
        if spec.roi:
            roi = make_disk_mask(sig_shape, spec.roi["cx"], spec.roi["cy"],
                                 spec.roi["r"]).reshape(-1)
            stack.data *= roi
        return stack
    return None


def validate_spec(spec: AnalysisSpec, descriptor: DatasetDescriptor) -> None:
    """Raise ValidationError for unusable parameters (geometry is clipped,
    not rejected, so only ordering/range rules can fail)."""
    build_mask_stack(spec, descriptor.sig_shape)
    if spec.variant == "pick_frame" and not (
            0 <= spec.frame < descriptor.total_frames):
        raise ValidationError(
            f"frame {spec.frame} out of range [0, {descriptor.total_frames})")


# -- result grid -------------------------------------------------------------

class ResultGrid:
    """Progressively assembled output: scan-position x channel values for
    frame-type analyses, or a detector-shaped accumulation for sum_frames /
    pick_frame."""

    def __init__(self, descriptor: DatasetDescriptor, spec: AnalysisSpec):
        self.descriptor = descriptor
        self.spec = spec
        self.kind = "sig" if spec.variant in ("sum_frames", "pick_frame") else "scan"
        if self.kind == "scan":
            stack = build_mask_stack(spec, descriptor.sig_shape)
            self.channels = stack.labels
            self.values = np.zeros((descriptor.total_frames, stack.k))
        else:
            self.channels = (spec.variant,)
            self.values = np.zeros((1, descriptor.n_pixels))
        self.filled: dict[int, bool] = {p.index: False for p in descriptor.partitions}
        self._checksums = np.zeros(len(self.channels))

    def merge_partial(self, partition: Partition, partial: np.ndarray) -> None:
        """Write one partition's slab; double merges are contract errors."""
        if self.filled[partition.index]:
            raise ValidationError(
                f"partition {partition.index} already merged")
        if self.kind == "scan":
            lo = partition.frame_start
            self.values[lo:lo + partition.frame_count] = partial
            self._checksums += np.sum(partial, axis=0)
        else:
            self.values += partial  # associative pixelwise sum
            self._checksums += np.sum(partial)
        self.filled[partition.index] = True

    @property
    def complete(self) -> bool:
        return all(self.filled.values())

    def scan_images(self) -> dict[str, np.ndarray]:
        """Per-channel images shaped like the scan grid (scan-type only)."""
        return {label: self.values[:, i].reshape(self.descriptor.scan_shape)
                for i, label in enumerate(self.channels)}

    def sig_image(self) -> np.ndarray:
        return self.values[0].reshape(self.descriptor.sig_shape)

    def channel_checksums(self) -> list[float]:
        """Per-channel float64 sums accumulated in merge order, so a client
        that sums the streamed partials in arrival order reproduces them."""
        return [float(c) for c in self._checksums]


def finalize_com(grid: ResultGrid):
    """Divide weighted sums by total intensity; zero-intensity positions are
    NaN and flagged invalid."""
    if tuple(grid.channels) != ("sum", "wx", "wy"):
        raise ValidationError("finalize_com needs channels (sum, wx, wy)")
    s = grid.values[:, 0]
    valid = s != 0
    with np.errstate(invalid="ignore", divide="ignore"):
        com_x = np.where(valid, grid.values[:, 1] / s, np.nan)
        com_y = np.where(valid, grid.values[:, 2] / s, np.nan)
    shape = grid.descriptor.scan_shape
    return (com_x.reshape(shape), com_y.reshape(shape), valid.reshape(shape))


# -- per-partition execution -------------------------------------------------

def apply_masks(tile: Tile, stack: MaskStack, accumulator: np.ndarray,
                frame_offset: int) -> None:
    """Accumulate mask dot products for one tile into the partition slab.

    Row-slab tiles use the matching pixel slice of every mask.
    """
    if tile.data.shape[1] == stack.data.shape[1]:
        masks = stack.data
    else:
        width = math.prod(stack.sig_shape[1:]) if len(stack.sig_shape) > 1 else 1
        lo = tile.row_start * width
        hi = (tile.row_start + tile.row_count) * width
        if hi - lo != tile.data.shape[1]:
            raise ValidationError(
                f"tile pixels {tile.data.shape[1]} do not match mask slice {hi - lo}")
        masks = np.ascontiguousarray(stack.data[:, lo:hi])
    rel = tile.frame_start - frame_offset
    codec.apply_mask_stack(tile.data, masks,
                           accumulator[rel:rel + tile.frame_count])


def run_partition_task(dataset_dir, descriptor: DatasetDescriptor,
                       partition: Partition, spec: AnalysisSpec,
                       plan: TilingPlan | None = None,
                       backend: ReadBackend | str = ReadBackend.MMAP,
                       cancel_check=None) -> np.ndarray:
    """Compute one partition's partial result.

    Returns a (frame_count, K) slab for frame-type analyses or a
    (1, n_pixels) accumulation for detector-type ones.  ``cancel_check``
    is polled at tile boundaries; a True return aborts with None.
    """
    if spec.variant == "pick_frame":
        lo, hi = partition.frame_start, partition.frame_start + partition.frame_count
        if not (lo <= spec.frame < hi):
            return np.zeros((1, descriptor.n_pixels))

    stack = build_mask_stack(spec, descriptor.sig_shape)
    if stack is not None:
        acc = np.zeros((partition.frame_count, stack.k))
    else:
        acc = np.zeros((1, descriptor.n_pixels))

    row_pixels = math.prod(descriptor.sig_shape[1:]) if len(descriptor.sig_shape) > 1 else 1

    for tile in tile_iterator(dataset_dir, descriptor, partition, plan, backend):
        if cancel_check is not None and cancel_check():
            return None
        if stack is not None:
            apply_masks(tile, stack, acc, partition.frame_start)
        elif spec.variant == "sum_frames":
            lo = tile.row_start * row_pixels
            acc[0, lo:lo + tile.data.shape[1]] += np.sum(
                tile.data, axis=0, dtype=np.float64)
        else:  # pick_frame
            if tile.frame_start <= spec.frame < tile.frame_start + tile.frame_count:
                rel = spec.frame - tile.frame_start
                lo = tile.row_start * row_pixels
                acc[0, lo:lo + tile.data.shape[1]] = tile.data[rel]
    return acc
