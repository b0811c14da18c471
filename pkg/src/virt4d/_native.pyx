# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: packed 12-bit decode and the mask-apply inner loop.

Selected at import by :mod:`virt4d.codec` / :mod:`virt4d.kernels`; the
pure-numpy fallbacks in ``_pure.py`` implement the same contracts.
"""

import numpy as np

cimport numpy as cnp


def decode_uint12_le(const unsigned char[::1] inp, unsigned short[::1] out):
    """Unpack little-endian 12-bit pairs: 3 input bytes -> 2 output values."""
    cdef Py_ssize_t n = inp.shape[0] // 3
    cdef Py_ssize_t i
    cdef unsigned short fst, mid, lst
    with nogil:
        for i in range(n):
            fst = inp[i * 3]
            mid = inp[i * 3 + 1]
            lst = inp[i * 3 + 2]
            out[i * 2] = fst | (mid & 0x0F) << 8
            out[i * 2 + 1] = (mid & 0xF0) >> 4 | lst << 4


def decode_uint12_le_f32(const unsigned char[::1] inp, float[::1] out):
    """Same unpacking, widening straight to float32 (exact for 12-bit values)."""
    cdef Py_ssize_t n = inp.shape[0] // 3
    cdef Py_ssize_t i
    cdef unsigned short fst, mid, lst
    with nogil:
        for i in range(n):
            fst = inp[i * 3]
            mid = inp[i * 3 + 1]
            lst = inp[i * 3 + 2]
            out[i * 2] = <float>(fst | (mid & 0x0F) << 8)
            out[i * 2 + 1] = <float>((mid & 0xF0) >> 4 | lst << 4)


def apply_mask_stack(const float[:, ::1] tile, const float[:, ::1] masks,
                     double[:, ::1] acc):
    """acc[f, k] += sum_p float32(tile[f, p] * masks[k, p]).

    Products are formed in float32, accumulation is float64 in pixel order.
    """
    cdef Py_ssize_t nf = tile.shape[0]
    cdef Py_ssize_t np_ = tile.shape[1]
    cdef Py_ssize_t nk = masks.shape[0]
    cdef Py_ssize_t f, k, p
    cdef double s
    cdef float prod
    with nogil:
        for f in range(nf):
            for k in range(nk):
                s = 0.0
                for p in range(np_):
                    prod = tile[f, p] * masks[k, p]
                    s += prod
                acc[f, k] += s
