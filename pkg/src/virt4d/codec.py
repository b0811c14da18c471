"""Bit-exact packed 12-bit codec and numeric conversion to float32.

Packed layout (little-endian): each consecutive pixel pair (a, b) occupies
3 bytes::

    byte0 = a[7:0]
    byte1 = a[11:8] | b[3:0] << 4
    byte2 = b[11:4]

The decode hot loop lives in the compiled extension when available; set
``VIRT4D_PURE_KERNELS=1`` to force the numpy fallback.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import CodecError

if os.environ.get("VIRT4D_PURE_KERNELS"):
    from . import _pure as _impl

    KERNEL_BACKEND = "pure"
else:
    try:
        from . import _native as _impl

        KERNEL_BACKEND = "native"
    except ImportError:
        from . import _pure as _impl

        KERNEL_BACKEND = "pure"

#: dtype tag -> bytes per pixel (uint12 is fractional: 2 pixels per 3 bytes)
DTYPE_ITEM_BYTES = {
    "float32_le": 4,
    "uint16_le": 2,
    "uint12_packed_le": 1.5,
}


def kernel_backend() -> str:
    """Which kernel implementation was selected at import ('native' or 'pure')."""
    return KERNEL_BACKEND


def decode_uint12_le(inp, out: np.ndarray | None = None) -> np.ndarray:
    """Decode a packed 12-bit buffer into uint16 values.

    ``inp`` is any bytes-like object whose length is a multiple of 3; the
    result has 2 values per 3 input bytes, all < 4096.
    """
    buf = memoryview(inp)
    if len(buf) % 3 != 0:
        raise CodecError(
            f"misaligned packed buffer: {len(buf)} bytes is not a multiple of 3")
    n_values = len(buf) // 3 * 2
    if out is None:
        out = np.empty(n_values, dtype=np.uint16)
    elif out.shape[0] != n_values:
        raise CodecError("output buffer size mismatch")
    _impl.decode_uint12_le(np.frombuffer(buf, dtype=np.uint8), out)
    return out


def decode_uint12_le_f32(inp, out: np.ndarray | None = None) -> np.ndarray:
    """Decode packed 12-bit straight to float32 (exact widening)."""
    buf = memoryview(inp)
    if len(buf) % 3 != 0:
        raise CodecError(
            f"misaligned packed buffer: {len(buf)} bytes is not a multiple of 3")
    n_values = len(buf) // 3 * 2
    if out is None:
        out = np.empty(n_values, dtype=np.float32)
    _impl.decode_uint12_le_f32(np.frombuffer(buf, dtype=np.uint8), out)
    return out


def encode_uint12_le(values) -> bytes:
    """Pack an even-length sequence of 12-bit values; exact inverse of decode."""
    v = np.asarray(values, dtype=np.uint16)
    if v.ndim != 1:
        v = v.reshape(-1)
    if v.size % 2 != 0:
        raise CodecError("odd value count cannot be packed into whole bytes")
    if v.size and int(v.max()) > 4095:
        raise CodecError("value exceeds 12 bits")
    pairs = v.reshape(-1, 2)
    out = np.empty((pairs.shape[0], 3), dtype=np.uint8)
    out[:, 0] = pairs[:, 0] & 0xFF
    out[:, 1] = (pairs[:, 0] >> 8) | ((pairs[:, 1] & 0x0F) << 4)
    out[:, 2] = pairs[:, 1] >> 4
    return out.tobytes()


def convert_to_f32(raw, dtype: str) -> np.ndarray:
    """Convert raw little-endian tile bytes of the given dtype to float32.

    Widening is numerically exact for all supported dtypes (uint12/uint16
    values are < 2**24; float32 is identity).
    """
    buf = memoryview(raw)
    if dtype == "float32_le":
        if len(buf) % 4 != 0:
            raise CodecError(f"misaligned tile: {len(buf)} bytes for float32_le")
        return np.frombuffer(buf, dtype="<f4")
    if dtype == "uint16_le":
        if len(buf) % 2 != 0:
            raise CodecError(f"misaligned tile: {len(buf)} bytes for uint16_le")
        return np.frombuffer(buf, dtype="<u2").astype(np.float32)
    if dtype == "uint12_packed_le":
        return decode_uint12_le_f32(buf)
    raise CodecError(f"unknown dtype {dtype!r}")


def apply_mask_stack(tile: np.ndarray, masks: np.ndarray, acc: np.ndarray) -> None:
    """acc[f, k] += sum_p float32(tile[f, p] * masks[k, p]); float64 accumulation."""
    if tile.shape[1] != masks.shape[1]:
        raise CodecError(
            f"pixel count mismatch: tile has {tile.shape[1]}, masks have {masks.shape[1]}")
    _impl.apply_mask_stack(tile, masks, acc)
