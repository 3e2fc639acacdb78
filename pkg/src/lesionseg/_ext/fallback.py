"""Pure-numpy versions of the hot kernels.

These are the reference implementations; the compiled module built from
``_kernels.pyx`` reproduces them bit for bit.

``im2row`` works on channels-last input and lays a patch out as
``(kernel_row, kernel_col, channel)``, which keeps the GEMM that follows in
its fast orientation (many pixels, few output channels).
"""
import numpy as np


def _out(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def im2row(x, kh, kw, stride, padding):
    """Unfold NHWC ``x`` into ``rows[n*ho*wo, kh*kw*c]``."""
    n, h, w, c = x.shape
    ho, wo = _out(h, kh, stride, padding), _out(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    rows = np.empty((n, ho, wo, kh * kw * c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            k = i * kw + j
            rows[..., k * c : (k + 1) * c] = x[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    return rows.reshape(n * ho * wo, kh * kw * c)


def row2im(rows, shape, kh, kw, stride, padding):
    """Scatter-add ``rows[n*ho*wo, kh*kw*c]`` into an NHWC array of ``shape``.

    Contributions reach each pixel in kernel-offset order (row-major).
    """
    n, h, w, c = shape
    ho, wo = _out(h, kh, stride, padding), _out(w, kw, stride, padding)
    rows = rows.reshape(n, ho, wo, kh * kw, c)
    out = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=rows.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += rows[:, :, :, i * kw + j]
    if padding:
        out = out[:, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(out)


def maxpool2_forward(x):
    """2x2 / stride-2 max pool of NHWC ``x``; returns (out, argmax 0..3 per window)."""
    n, h, w, c = x.shape
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(n, h // 2, w // 2, c, 4)
    # argmax returns the first maximum, i.e. row-major tie-breaking
    arg = win.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2_backward(arg, upstream):
    n, ho, wo, c = upstream.shape
    grad = np.zeros((n, ho, wo, c, 4), dtype=upstream.dtype)
    np.put_along_axis(grad, arg[..., None].astype(np.intp), upstream[..., None], axis=-1)
    grad = grad.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(grad.reshape(n, 2 * ho, 2 * wo, c))
