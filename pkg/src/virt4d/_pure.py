"""Pure-numpy fallbacks for the compiled kernels in ``_native``.

Contracts match ``_native.pyx`` exactly: 12-bit unpacking is bit-identical,
mask application forms float32 products and accumulates in float64.
"""

import numpy as np


def decode_uint12_le(inp, out):
    b = np.frombuffer(inp, dtype=np.uint8).reshape(-1, 3).astype(np.uint16)
    pairs = out.reshape(-1, 2)
    pairs[:, 0] = b[:, 0] | (b[:, 1] & 0x0F) << 8
    pairs[:, 1] = (b[:, 1] & 0xF0) >> 4 | b[:, 2] << 4


def decode_uint12_le_f32(inp, out):
    tmp = np.empty(out.shape[0], dtype=np.uint16)
    decode_uint12_le(inp, tmp)
    np.copyto(out, tmp, casting="safe")


def apply_mask_stack(tile, masks, acc):
    # One pass per mask channel keeps the float32 product / float64
    # accumulation discipline; K is small so the loop is cheap.
    for k in range(masks.shape[0]):
        acc[:, k] += np.sum(tile * masks[k], axis=1, dtype=np.float64)
