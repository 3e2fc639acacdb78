"""Rank-4 tensor kernels with explicit backward passes.

The public functions take and return plain ``numpy.ndarray`` tensors of shape
``[n, c, h, w]`` and work in the dtype of their input (float64 for gradient
checks, float32 for training).  Convolutions are cross-correlations; the
transposed convolution uses the same ``[c_out, c_in, kh, kw]`` weight layout
as ``conv2d``.

Internally everything runs channels-last: the ``*_nhwc`` functions are what
the network layers call, so activations never bounce between layouts.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import _ext

__all__ = [
    "KernelParams",
    "ShapeError",
    "as_tensor",
    "conv2d_forward",
    "conv2d_backward",
    "convtranspose2_forward",
    "convtranspose2_backward",
    "maxpool2_forward",
    "maxpool2_backward",
    "concat_channels",
    "split_channels",
    "activation",
    "activation_backward",
    "sigmoid",
    "finite_diff_grad",
]


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with a kernel."""


@dataclass
class KernelParams:
    weight: np.ndarray  # [c_out, c_in, kh, kw]
    bias: np.ndarray  # [c_out]
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"weight must be rank 4, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match c_out={self.weight.shape[0]}"
            )
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid stride={self.stride} / padding={self.padding}")

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]


def as_tensor(x, dtype=None) -> np.ndarray:
    """Return ``x`` as a C-contiguous rank-4 array."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 tensor, got shape {arr.shape}")
    return arr


def to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def to_nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def _out_dim(size: int, k: int, stride: int, pad: int, axis: str) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"{axis}: (size {size} + 2*{pad} - kernel {k}) / stride {stride} + 1 is not a positive integer"
        )
    return span // stride + 1


def _check_channels(c: int, shape, k: KernelParams):
    if c != k.c_in:
        raise ShapeError(
            f"input shape {tuple(shape)} has {c} channels but weight shape {k.weight.shape} expects {k.c_in}"
        )


# -- convolution (channels-last core) ----------------------------------------


def _patch_weight(k: KernelParams, dtype) -> np.ndarray:
    """Weight as ``[kh*kw*c_in, c_out]`` matching the im2row patch layout."""
    return k.weight.transpose(2, 3, 1, 0).reshape(-1, k.c_out).astype(dtype, copy=False)


def _flipped_weight(k: KernelParams, dtype) -> np.ndarray:
    """Rotated kernel ``[kh*kw*c_out, c_in]`` for the stride-1 input gradient."""
    w = k.weight[:, :, ::-1, ::-1]
    return np.ascontiguousarray(w.transpose(2, 3, 0, 1)).reshape(-1, k.c_in).astype(dtype, copy=False)


def conv2d_forward_nhwc(x: np.ndarray, k: KernelParams):
    """Returns ``(out, rows)``; ``rows`` is the unfolded input kept for backward."""
    n, h, w, c = x.shape
    _check_channels(c, x.shape, k)
    kh, kw = k.kernel_size
    ho = _out_dim(h, kh, k.stride, k.padding, "height")
    wo = _out_dim(w, kw, k.stride, k.padding, "width")
    rows = _ext.im2row(x, kh, kw, k.stride, k.padding)
    out = rows @ _patch_weight(k, x.dtype)
    out += k.bias.astype(x.dtype, copy=False)
    return out.reshape(n, ho, wo, k.c_out), rows


def conv2d_backward_nhwc(x_shape, rows, k: KernelParams, upstream: np.ndarray, need_input=True):
    n, h, w, c = x_shape
    kh, kw = k.kernel_size
    g = upstream.reshape(-1, k.c_out)
    grad_bias = g.sum(axis=0)
    gwt = rows.T @ g  # [kh*kw*c_in, c_out]
    grad_weight = np.ascontiguousarray(gwt.T.reshape(k.c_out, kh, kw, c).transpose(0, 3, 1, 2))
    grad_input = None
    if need_input:
        full_pad = kh - 1 - k.padding
        if k.stride == 1 and kh == kw and full_pad == k.padding:
            # stride-1 "same" conv: input gradient is a conv of upstream with the rotated kernel
            urows = _ext.im2row(np.ascontiguousarray(upstream), kh, kw, 1, full_pad)
            grad_input = (urows @ _flipped_weight(k, upstream.dtype)).reshape(n, h, w, c)
        else:
            grows = g @ _patch_weight(k, upstream.dtype).T
            grad_input = _ext.row2im(
                np.ascontiguousarray(grows), (n, h, w, c), kh, kw, k.stride, k.padding
            )
    return grad_input, grad_weight, grad_bias


def conv2d_forward(x: np.ndarray, k: KernelParams) -> np.ndarray:
    """Cross-correlation of ``x`` with ``k.weight`` plus bias."""
    x = as_tensor(x)
    _check_channels(x.shape[1], x.shape, k)
    return to_nchw(conv2d_forward_nhwc(to_nhwc(x), k)[0])


def conv2d_backward(x: np.ndarray, k: KernelParams, upstream: np.ndarray):
    """Gradients of ``sum(upstream * conv2d_forward(x, k))``.

    Returns ``(grad_input, grad_weight, grad_bias)``.
    """
    x = as_tensor(x)
    _check_channels(x.shape[1], x.shape, k)
    kh, kw = k.kernel_size
    ho = _out_dim(x.shape[2], kh, k.stride, k.padding, "height")
    wo = _out_dim(x.shape[3], kw, k.stride, k.padding, "width")
    upstream = as_tensor(upstream, dtype=x.dtype)
    expected = (x.shape[0], k.c_out, ho, wo)
    if upstream.shape != expected:
        raise ShapeError(f"upstream shape {upstream.shape} != forward output shape {expected}")
    xh = to_nhwc(x)
    rows = _ext.im2row(xh, kh, kw, k.stride, k.padding)
    gx, gw, gb = conv2d_backward_nhwc(xh.shape, rows, k, to_nhwc(upstream))
    return to_nchw(gx), gw, gb


# -- transposed convolution ---------------------------------------------------


def _scatter_weight(k: KernelParams, dtype) -> np.ndarray:
    """Weight as ``[c_in, kh*kw*c_out]``: what one input pixel adds to its window."""
    return k.weight.transpose(1, 2, 3, 0).reshape(k.c_in, -1).astype(dtype, copy=False)


def _convt_check(shape, k: KernelParams):
    n, h, w, c = shape
    _check_channels(c, shape, k)
    if k.padding:
        raise ShapeError("transposed convolution supports padding=0 only")
    kh, kw = k.kernel_size
    return (h - 1) * k.stride + kh, (w - 1) * k.stride + kw


def convtranspose2_forward_nhwc(x: np.ndarray, k: KernelParams) -> np.ndarray:
    n = x.shape[0]
    ho, wo = _convt_check(x.shape, k)
    kh, kw = k.kernel_size
    rows = x.reshape(-1, k.c_in) @ _scatter_weight(k, x.dtype)  # [n*h*w, kh*kw*c_out]
    out = _ext.row2im(rows, (n, ho, wo, k.c_out), kh, kw, k.stride, 0)
    out += k.bias.astype(x.dtype, copy=False)
    return out


def convtranspose2_backward_nhwc(x: np.ndarray, k: KernelParams, upstream: np.ndarray):
    n, h, w, c = x.shape
    kh, kw = k.kernel_size
    grad_bias = upstream.reshape(-1, k.c_out).sum(axis=0)
    urows = _ext.im2row(np.ascontiguousarray(upstream), kh, kw, k.stride, 0)  # [n*h*w, kh*kw*c_out]
    gm = x.reshape(-1, c).T @ urows  # [c_in, kh*kw*c_out]
    grad_weight = np.ascontiguousarray(gm.reshape(c, kh, kw, k.c_out).transpose(3, 0, 1, 2))
    gx = (urows @ _scatter_weight(k, x.dtype).T).reshape(n, h, w, c)
    return gx, grad_weight, grad_bias


def convtranspose2_forward(x: np.ndarray, k: KernelParams) -> np.ndarray:
    """Transposed convolution: scatter-add of each input pixel times the kernel.

    With the default 2x2 kernel and stride 2 the output is exactly twice the
    input's spatial size.
    """
    x = as_tensor(x)
    return to_nchw(convtranspose2_forward_nhwc(to_nhwc(x), k))


def convtranspose2_backward(x: np.ndarray, k: KernelParams, upstream: np.ndarray):
    """Gradients of ``sum(upstream * convtranspose2_forward(x, k))``."""
    x = as_tensor(x)
    xh = to_nhwc(x)
    ho, wo = _convt_check(xh.shape, k)
    upstream = as_tensor(upstream, dtype=x.dtype)
    expected = (x.shape[0], k.c_out, ho, wo)
    if upstream.shape != expected:
        raise ShapeError(f"upstream shape {upstream.shape} != forward output shape {expected}")
    gx, gw, gb = convtranspose2_backward_nhwc(xh, k, to_nhwc(upstream))
    return to_nchw(gx), gw, gb


# -- pooling ------------------------------------------------------------------


def maxpool2_forward_nhwc(x: np.ndarray):
    if x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError(
            f"maxpool2 needs even spatial dims, got {x.shape[1]}x{x.shape[2]}; pad the input first"
        )
    return _ext.maxpool2_forward(x)


def maxpool2_backward_nhwc(argmax_map: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    if argmax_map.shape != upstream.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != pooled shape {argmax_map.shape}")
    return _ext.maxpool2_backward(argmax_map, np.ascontiguousarray(upstream))


def maxpool2_forward(x: np.ndarray):
    """2x2 / stride-2 max pool.

    Returns ``(output, argmax_map)`` where ``argmax_map`` holds the row-major
    position (0..3) of the winner in each window; ties go to the first.
    """
    x = as_tensor(x)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(
            f"maxpool2 needs even spatial dims, got {x.shape[2]}x{x.shape[3]}; pad the input first"
        )
    out, arg = maxpool2_forward_nhwc(to_nhwc(x))
    return to_nchw(out), to_nchw(arg)


def maxpool2_backward(argmax_map: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    upstream = as_tensor(upstream)
    if argmax_map.shape != upstream.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != pooled shape {argmax_map.shape}")
    arg = to_nhwc(np.asarray(argmax_map, dtype=np.int8))
    return to_nchw(maxpool2_backward_nhwc(arg, to_nhwc(upstream)))


# -- concat / activations -----------------------------------------------------


def concat_channels(inputs: Sequence[np.ndarray], axis: int = 1) -> np.ndarray:
    """Stack tensors along the channel axis (1 for NCHW, 3 for NHWC)."""
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    ref = inputs[0].shape
    others = [d for d in range(4) if d != axis]
    for idx, t in enumerate(inputs):
        if t.ndim != 4 or any(t.shape[d] != ref[d] for d in others):
            raise ShapeError(
                f"input {idx} has shape {t.shape}, incompatible with input 0 shape {ref}"
            )
    return np.concatenate(inputs, axis=axis)


def split_channels(upstream: np.ndarray, channels: Sequence[int], axis: int = 1) -> list[np.ndarray]:
    """Backward of :func:`concat_channels`: cut ``upstream`` into channel blocks."""
    if sum(channels) != upstream.shape[axis]:
        raise ShapeError(f"channel blocks {list(channels)} do not sum to {upstream.shape[axis]}")
    bounds = np.cumsum(channels)[:-1]
    return [np.ascontiguousarray(p) for p in np.split(upstream, bounds, axis=axis)]


def sigmoid(x: np.ndarray) -> np.ndarray:
    # branch on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(x: np.ndarray, kind: str, upstream: np.ndarray) -> np.ndarray:
    """Gradient through an activation; ``x`` is the pre-activation input."""
    if kind == "relu":
        return upstream * (x > 0)
    if kind == "sigmoid":
        s = sigmoid(x)
        return upstream * s * (1 - s)
    raise ValueError(f"unknown activation {kind!r}")


# -- oracle -------------------------------------------------------------------


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape, float64)."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"f is not finite near element {i}")
        gflat[i] = (fp - fm) / (2 * step)
    return grad
