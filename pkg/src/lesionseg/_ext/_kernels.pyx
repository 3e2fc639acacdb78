# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2row/row2im and 2x2 max-pool kernels (channels-last).

Loop orders mirror ``fallback.py`` so that accumulations happen in the same
sequence and results are bit-identical.
"""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def im2row(real[:, :, :, ::1] x, int kh, int kw, int stride, int padding):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * padding - kw) // stride + 1
    cdef Py_ssize_t width = kh * kw * c
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n * ho * wo, width), dtype=dtype)
    cdef real[:, ::1] rows = out
    cdef Py_ssize_t b, y, xx, i, j, ci, sy, sx, r
    cdef real *src
    cdef real *dst
    with nogil:
        for b in range(n):
            for y in range(ho):
                for xx in range(wo):
                    r = (b * ho + y) * wo + xx
                    dst = &rows[r, 0]
                    for i in range(kh):
                        sy = y * stride + i - padding
                        if sy < 0 or sy >= h:
                            continue
                        for j in range(kw):
                            sx = xx * stride + j - padding
                            if sx < 0 or sx >= w:
                                continue
                            src = &x[b, sy, sx, 0]
                            for ci in range(c):
                                dst[(i * kw + j) * c + ci] = src[ci]
    return out


def row2im(real[:, ::1] rows, tuple shape, int kh, int kw, int stride, int padding):
    cdef Py_ssize_t n = shape[0], h = shape[1], w = shape[2], c = shape[3]
    cdef Py_ssize_t ho = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * padding - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, h, w, c), dtype=dtype)
    cdef real[:, :, :, ::1] img = out
    cdef Py_ssize_t b, y, xx, i, j, ci, sy, sx, r, off
    cdef real *src
    cdef real *dst
    # kernel offset outermost: each pixel accumulates contributions in (i, j) order
    with nogil:
        for i in range(kh):
            for j in range(kw):
                off = (i * kw + j) * c
                for b in range(n):
                    for y in range(ho):
                        sy = y * stride + i - padding
                        if sy < 0 or sy >= h:
                            continue
                        for xx in range(wo):
                            sx = xx * stride + j - padding
                            if sx < 0 or sx >= w:
                                continue
                            src = &rows[(b * ho + y) * wo + xx, off]
                            dst = &img[b, sy, sx, 0]
                            for ci in range(c):
                                dst[ci] += src[ci]
    return out


def maxpool2_forward(real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], ho = x.shape[1] // 2, wo = x.shape[2] // 2, c = x.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, ho, wo, c), dtype=dtype)
    arg = np.empty((n, ho, wo, c), dtype=np.int8)
    cdef real[:, :, :, ::1] o = out
    cdef cnp.int8_t[:, :, :, ::1] a = arg
    cdef Py_ssize_t b, y, xx, ci, k
    cdef real best, v
    cdef cnp.int8_t bi
    with nogil:
        for b in range(n):
            for y in range(ho):
                for xx in range(wo):
                    for ci in range(c):
                        best = x[b, 2 * y, 2 * xx, ci]
                        bi = 0
                        for k in range(1, 4):
                            v = x[b, 2 * y + k // 2, 2 * xx + k % 2, ci]
                            if v > best:
                                best = v
                                bi = <cnp.int8_t>k
                        o[b, y, xx, ci] = best
                        a[b, y, xx, ci] = bi
    return out, arg


def maxpool2_backward(cnp.int8_t[:, :, :, ::1] arg, real[:, :, :, ::1] upstream):
    cdef Py_ssize_t n = upstream.shape[0], ho = upstream.shape[1]
    cdef Py_ssize_t wo = upstream.shape[2], c = upstream.shape[3]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, 2 * ho, 2 * wo, c), dtype=dtype)
    cdef real[:, :, :, ::1] g = out
    cdef Py_ssize_t b, y, xx, ci, k
    with nogil:
        for b in range(n):
            for y in range(ho):
                for xx in range(wo):
                    for ci in range(c):
                        k = arg[b, y, xx, ci]
                        g[b, 2 * y + k // 2, 2 * xx + k % 2, ci] = upstream[b, y, xx, ci]
    return out
