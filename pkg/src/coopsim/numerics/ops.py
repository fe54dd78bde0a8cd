"""Differentiable operations over :class:`Tensor`.

Convolutions are cross-correlations (no kernel flip). ``conv2d`` accepts a
single ``[C, H, W]`` map or a batch ``[N, C, H, W]``; the batch axis is only
there so per-node passes can share one BLAS call.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError, DimensionError
from .tensor import Tensor, as_tensor, record


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ----------------------------------------------------------------------------
# elementwise arithmetic
# ----------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), bw, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)
    return record(out, (x,), lambda g: (g / x.data,), "log")


# ----------------------------------------------------------------------------
# shape manipulation and reductions
# ----------------------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return record(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.data.size // max(out.size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape),)

    return record(out, (x,), bw, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return record(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def getitem(x: Tensor, index) -> Tensor:
    out = np.ascontiguousarray(x.data[index])

    def bw(g):
        full = np.zeros_like(x.data)
        if _has_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return record(out, (x,), bw, "getitem")


def _has_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(out, tensors, bw, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("stack of an empty list")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack needs equal shapes, got {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return record(out, tensors, bw, "stack")


# ----------------------------------------------------------------------------
# activations
# ----------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return record(out, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)
    return record(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return record(out, (x,), bw, "log_softmax")


# ----------------------------------------------------------------------------
# convolutions
# ----------------------------------------------------------------------------

def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0:
        raise ConfigurationError(f"kernel {k} larger than padded input {n + 2 * pad}")
    return span // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of ``[C,H,W]`` or ``[N,C,H,W]`` input."""
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"invalid stride={stride} / pad={pad}")
    if kernel.ndim != 4:
        raise DimensionError(f"kernel must be [Cout,Cin,kh,kw], got {kernel.shape}")
    cout, cin, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"kernel extent must be odd, got {kh}x{kw}")
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d input must be 3-D or 4-D, got {x.shape}")
    xd = x.data[None] if single else x.data
    n, c, h, w = xd.shape
    if c != cin:
        raise DimensionError(f"input has {c} channels, kernel expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} != ({cout},)")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    wd = kernel.data

    if kh == 1 and kw == 1 and pad == 0:
        xs = xd[:, :, ::stride, ::stride]
        out = np.einsum("oc,nchw->nohw", wd[:, :, 0, 0], xs, optimize=True)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
        # im2col laid out [N, C*kh*kw, ho*wo] so one batched GEMM yields NCHW
        cols = np.empty((n, c, kh, kw, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
        cols = cols.reshape(n, c * kh * kw, ho * wo)
        wm = wd.reshape(cout, c * kh * kw)
        out = np.matmul(wm, cols).reshape(n, cout, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=xd.dtype)

    def bw(g):
        g4 = g[None] if single else g
        gk = gb = gx = None
        if kh == 1 and kw == 1 and pad == 0:
            if kernel.requires_grad:
                gk = np.einsum("nohw,nchw->oc", g4, xs, optimize=True)[:, :, None, None]
            if x.requires_grad:
                gxs = np.einsum("oc,nohw->nchw", wd[:, :, 0, 0], g4, optimize=True)
                gx = np.zeros_like(xd)
                gx[:, :, ::stride, ::stride] = gxs
        else:
            g3 = g4.reshape(n, cout, ho * wo)
            if kernel.requires_grad:
                gk = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
            if x.requires_grad:
                gcols = np.matmul(wm.T, g3).reshape(n, c, kh, kw, ho, wo)
                gxp = np.zeros(xp.shape, dtype=xd.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
                gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        if bias is not None and bias.requires_grad:
            gb = g4.sum(axis=(0, 2, 3))
        if gx is not None and single:
            gx = gx[0]
        return (gx, gk, gb) if bias is not None else (gx, gk)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return record(out[0] if single else out, inputs, bw, "conv2d")


def conv1d_temporal(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """1-D convolution along the leading time axis of ``[T,C,H,W]``.

    ``kernel`` is ``[Cout, Cin, L]``; every spatial cell is convolved
    independently with the same weights. Output is ``[T',Cout,H,W]`` with
    ``T' = (T - L) // stride + 1`` (no temporal padding).
    """
    if x.ndim != 4:
        raise DimensionError(f"temporal conv input must be [T,C,H,W], got {x.shape}")
    if kernel.ndim != 3:
        raise DimensionError(f"temporal kernel must be [Cout,Cin,L], got {kernel.shape}")
    t, c, h, w = x.shape
    cout, cin, length = kernel.shape
    if c != cin:
        raise DimensionError(f"input has {c} channels, kernel expects {cin}")
    if t < length:
        raise DimensionError(f"time extent {t} smaller than kernel length {length}")
    if stride < 1:
        raise ConfigurationError(f"invalid stride {stride}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} != ({cout},)")
    to = (t - length) // stride + 1
    win = sliding_window_view(x.data, length, axis=0)[::stride][:to]  # to,c,h,w,L
    out = np.tensordot(win, kernel.data, axes=([1, 4], [1, 2])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def bw(g):
        gk = gx = gb = None
        if kernel.requires_grad:
            gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            per_tap = np.tensordot(g, kernel.data, axes=([1], [0]))  # to,h,w,cin,L
            for tap in range(length):
                gx[tap:tap + stride * to:stride] += per_tap[..., tap].transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gk, gb) if bias is not None else (gx, gk)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return record(out, inputs, bw, "conv1d_temporal")


# ----------------------------------------------------------------------------
# resampling
# ----------------------------------------------------------------------------

def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes."""
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)

    def bw(g):
        shp = g.shape[:-2] + (g.shape[-2] // factor, factor, g.shape[-1] // factor, factor)
        return (g.reshape(shp).sum(axis=(-3, -1)),)

    return record(out, (x,), bw, "upsample_nearest")


def gather_cells(x: Tensor, src_index: np.ndarray, valid: np.ndarray) -> Tensor:
    """Per-channel gather over flattened spatial cells with zero fill.

    ``x`` is ``[C,H,W]``; ``src_index`` and ``valid`` are ``[H',W']`` arrays
    naming, for each output cell, the flat source cell to copy (ignored where
    ``valid`` is false, which yields 0).
    """
    if x.ndim != 3:
        raise DimensionError(f"gather_cells expects [C,H,W], got {x.shape}")
    c, h, w = x.shape
    flat = x.data.reshape(c, h * w)
    idx = np.where(valid, src_index, 0).reshape(-1)
    vmask = valid.reshape(-1)
    out = flat[:, idx] * vmask.astype(x.dtype)
    out = out.reshape((c,) + valid.shape)

    def bw(g):
        gf = g.reshape(c, -1)[:, vmask]
        sel = idx[vmask]
        keys = (np.arange(c)[:, None] * (h * w) + sel[None, :]).reshape(-1)
        gx = np.bincount(keys, weights=gf.reshape(-1), minlength=c * h * w)
        return (gx.astype(x.dtype).reshape(c, h, w),)

    return record(out, (x,), bw, "gather_cells")
