"""Benchmark helpers: kernel (compiled vs pure) comparison and dataset
fixture generation for throughput sweeps."""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np

from . import _pure
from .dataset import ingest

try:
    from . import _native
except ImportError:
    _native = None


def _time(fn, *args, repeats: int = 3) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def benchmark_kernels(packed_mib: int = 24, tile_mib: int = 16) -> dict:
    """Compare the compiled and pure implementations of both hot kernels.

    Reports decode throughput in packed MiB/s and mask-apply throughput in
    float32 MiB/s, per implementation.
    """
    rng = np.random.default_rng(0)
    packed = rng.integers(0, 256, size=packed_mib * 2**20, dtype=np.uint8)
    packed = packed.reshape(-1, 3).reshape(-1)  # length multiple of 3
    out16 = np.empty(packed.size // 3 * 2, dtype=np.uint16)

    pixels = 16384
    frames = tile_mib * 2**20 // (pixels * 4)
    tile = rng.random((frames, pixels), dtype=np.float32)
    masks = rng.random((1, pixels), dtype=np.float32)
    acc = np.zeros((frames, 1))

    impls = {"pure": _pure}
    if _native is not None:
        impls["native"] = _native
    report = {"packed_mib": packed_mib, "tile_mib": tile_mib, "kernels": {}}
    for name, impl in impls.items():
        t_dec = _time(impl.decode_uint12_le, packed, out16)
        t_app = _time(impl.apply_mask_stack, tile, masks, acc)
        report["kernels"][name] = {
            "decode_packed_mib_s": packed.nbytes / 2**20 / t_dec,
            "decode_values_per_s": out16.size / t_dec,
            "apply_f32_mib_s": tile.nbytes / 2**20 / t_app,
        }
    if "native" in report["kernels"]:
        rk = report["kernels"]
        report["native_vs_pure_decode"] = (
            rk["native"]["decode_packed_mib_s"] / rk["pure"]["decode_packed_mib_s"])
        report["native_vs_pure_apply"] = (
            rk["native"]["apply_f32_mib_s"] / rk["pure"]["apply_f32_mib_s"])
    return report


def make_random_dataset(output_dir, scan_shape, sig_shape,
                        dtype: str = "float32_le",
                        target_partition_bytes: int = 64 * 1024 * 1024,
                        seed: int = 0):
    """Write a random raw source and ingest it; returns the descriptor."""
    from . import codec
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n = int(np.prod(scan_shape)) * int(np.prod(sig_shape))
    src = out / "source.raw"
    if dtype == "float32_le":
        rng.random(n, dtype=np.float32).tofile(src)
    elif dtype == "uint16_le":
        rng.integers(0, 65536, size=n, dtype=np.uint16).tofile(src)
    elif dtype == "uint12_packed_le":
        vals = rng.integers(0, 4096, size=n, dtype=np.uint16)
        src.write_bytes(codec.encode_uint12_le(vals))
    else:
        raise ValueError(f"unsupported dtype {dtype}")
    return ingest(src, dtype, scan_shape, sig_shape, out / "ds",
                  target_partition_bytes=target_partition_bytes)
