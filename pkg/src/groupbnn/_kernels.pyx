# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: XNOR-popcount group convolution and im2col/col2im.

XNOR operands arrive channel-packed: activations as (n, groups, h, w, words)
and weights as (out, kh, kw, words), both uint64 with zeroed padding bits.
Column buffers are laid out (groups, cg*kh*kw, n*ho*wo).
"""

import numpy as np

from libc.stdint cimport int32_t, int64_t, uint64_t

cdef extern from *:
    """
    #if defined(__GNUC__) || defined(__clang__)
    #define GB_POPCOUNT64(x) __builtin_popcountll((unsigned long long)(x))
    #else
    static inline int GB_POPCOUNT64(unsigned long long x) {
        x = x - ((x >> 1) & 0x5555555555555555ULL);
        x = (x & 0x3333333333333333ULL) + ((x >> 2) & 0x3333333333333333ULL);
        x = (x + (x >> 4)) & 0x0F0F0F0F0F0F0F0FULL;
        return (int)((x * 0x0101010101010101ULL) >> 56);
    }
    #endif
    """
    int GB_POPCOUNT64(uint64_t x) nogil


NAME = "cython"


def popcount_xor(const uint64_t[::1] a, const uint64_t[::1] b):
    """Number of differing bits between two equal-length word arrays."""
    cdef Py_ssize_t k, nw = a.shape[0]
    cdef int64_t acc = 0
    if b.shape[0] != nw:
        raise ValueError("word arrays differ in length")
    with nogil:
        for k in range(nw):
            acc += GB_POPCOUNT64(a[k] ^ b[k])
    return acc


def xnor_conv_counts(const uint64_t[:, :, :, :, ::1] xw,
                     const uint64_t[:, :, :, ::1] ww,
                     int channels_per_group,
                     int sh, int sw, int ph, int pw,
                     int ho, int wo):
    """Integer +-1 group convolution over valid taps only."""
    cdef Py_ssize_t n_batch = xw.shape[0], groups = xw.shape[1]
    cdef Py_ssize_t h = xw.shape[2], w = xw.shape[3], nw = xw.shape[4]
    cdef Py_ssize_t n_out = ww.shape[0], kh = ww.shape[1], kw = ww.shape[2]
    if ww.shape[3] != nw:
        raise ValueError("activation and weight word counts differ")
    if n_out % groups:
        raise ValueError("output channels not divisible by groups")
    cdef Py_ssize_t og = n_out // groups
    out = np.empty((n_batch, n_out, ho, wo), dtype=np.int32)
    cdef int32_t[:, :, :, ::1] ov = out
    cdef Py_ssize_t n, o, b, oy, ox, i, j, k, iy, ix
    cdef int64_t acc, taps
    with nogil:
        for n in range(n_batch):
            for o in range(n_out):
                b = o // og
                for oy in range(ho):
                    for ox in range(wo):
                        acc = 0
                        taps = 0
                        for i in range(kh):
                            iy = oy * sh - ph + i
                            if iy < 0 or iy >= h:
                                continue
                            for j in range(kw):
                                ix = ox * sw - pw + j
                                if ix < 0 or ix >= w:
                                    continue
                                taps += 1
                                for k in range(nw):
                                    acc += GB_POPCOUNT64(xw[n, b, iy, ix, k] ^ ww[o, i, j, k])
                        ov[n, o, oy, ox] = <int32_t>(taps * channels_per_group - 2 * acc)
    return out


def im2col(const float[:, :, :, ::1] x, int groups, int kh, int kw,
           int sh, int sw, int ph, int pw, int ho, int wo):
    """Column buffer of a zero-padded group convolution input."""
    cdef Py_ssize_t n_batch = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    if c % groups:
        raise ValueError("channels not divisible by groups")
    cdef Py_ssize_t cg = c // groups
    out = np.zeros((groups, cg * kh * kw, n_batch * ho * wo), dtype=np.float32)
    cdef float[:, :, ::1] ov = out
    cdef Py_ssize_t ch, gi, row, i, j, b, oy, ox, iy, ix, col0
    with nogil:
        for ch in range(c):
            gi = ch // cg
            for i in range(kh):
                for j in range(kw):
                    row = ((ch % cg) * kh + i) * kw + j
                    for b in range(n_batch):
                        for oy in range(ho):
                            iy = oy * sh - ph + i
                            if iy < 0 or iy >= h:
                                continue
                            col0 = (b * ho + oy) * wo
                            for ox in range(wo):
                                ix = ox * sw - pw + j
                                if 0 <= ix < w:
                                    ov[gi, row, col0 + ox] = x[b, ch, iy, ix]
    return out


def col2im(const float[:, :, ::1] cols, int n_batch, int c, int h, int w,
           int kh, int kw, int sh, int sw, int ph, int pw, int ho, int wo):
    """Adjoint of :func:`im2col`: scatter-add columns back onto the input grid."""
    cdef Py_ssize_t groups = cols.shape[0]
    if c % groups:
        raise ValueError("channels not divisible by groups")
    cdef Py_ssize_t cg = c // groups
    if cols.shape[1] != cg * kh * kw or cols.shape[2] != n_batch * ho * wo:
        raise ValueError("column buffer shape does not match the geometry")
    out = np.zeros((n_batch, c, h, w), dtype=np.float32)
    cdef float[:, :, :, ::1] dv = out
    cdef Py_ssize_t ch, gi, row, i, j, b, oy, ox, iy, ix, col0
    with nogil:
        for ch in range(c):
            gi = ch // cg
            for i in range(kh):
                for j in range(kw):
                    row = ((ch % cg) * kh + i) * kw + j
                    for b in range(n_batch):
                        for oy in range(ho):
                            iy = oy * sh - ph + i
                            if iy < 0 or iy >= h:
                                continue
                            col0 = (b * ho + oy) * wo
                            for ox in range(wo):
                                ix = ox * sw - pw + j
                                if 0 <= ix < w:
                                    dv[b, ch, iy, ix] += cols[gi, row, col0 + ox]
    return out
