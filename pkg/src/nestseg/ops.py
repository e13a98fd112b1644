"""Differentiable primitives on NCHW tensors.

Every function takes and returns :class:`~nestseg.tensor.Tensor` objects and
registers a backward rule on the active tape (if any).
"""
from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_result


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{what} expects a 4-D (B, C, H, W) tensor, got shape {x.shape}")


# -- convolution -----------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B, C, H, W) -> (C*k*k, B*H*W) patch matrix with zero 'same' padding."""
    b, c, h, w = x.shape
    if k == 1:
        return np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(c, b * h * w)
    p = k // 2
    xpad = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xpad, (k, k), axis=(2, 3))  # B, C, H, W, k, k
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, b * h * w)


def _correlate(x: np.ndarray, weight: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Raw same-padded cross-correlation; returns (output, patch matrix)."""
    b, _, h, w = x.shape
    cout, cin, k, _ = weight.shape
    cols = _im2col(x, k)
    out = weight.reshape(cout, cin * k * k) @ cols
    return np.ascontiguousarray(out.reshape(cout, b, h, w).transpose(1, 0, 2, 3)), cols


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Stride-1 cross-correlation with zero 'same' padding.

    ``weight`` has shape (Cout, Cin, k, k) with odd k (3 for node convs,
    1 for output heads); the output keeps the input's spatial size.
    """
    _check_4d(x, "conv2d input")
    if weight.ndim != 4:
        raise ValueError(f"conv2d weight must be (Cout, Cin, k, k), got shape {weight.shape}")
    cout, cin, kh, kw = weight.shape
    b, c, h, w = x.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d needs a square odd kernel, got weight shape {weight.shape}")
    if cin != c:
        raise ValueError(
            f"conv2d shape mismatch: input {x.shape} has {c} channels, weight {weight.shape} expects {cin}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match weight {weight.shape}")

    out, cols = _correlate(x.data, weight.data)
    if bias is not None:
        out += bias.data[:, None, None]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g: np.ndarray):
        gx = gw = gb = None
        if x.requires_grad:
            # input gradient = correlation with the flipped, transposed kernel
            flipped = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx, _ = _correlate(g, flipped)
        if weight.requires_grad:
            gflat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
            gw = (gflat @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return [gx, gw] if bias is None else [gx, gw, gb]

    return make_result(out, inputs, backward)


# -- resampling --------------------------------------------------------------

def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties go to the row-major earliest element."""
    _check_4d(x, "maxpool2")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got shape {x.shape}")
    win = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray):
        routed = np.zeros((b, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(routed, idx[..., None], g[..., None], axis=-1)
        gx = routed.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return [gx]

    return make_result(np.ascontiguousarray(out), (x,), backward)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling: each pixel becomes a 2x2 block."""
    _check_4d(x, "upsample2")
    b, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (b, c, h, 2, w, 2)).reshape(b, c, 2 * h, 2 * w)

    def backward(g: np.ndarray):
        return [g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5))]

    return make_result(np.ascontiguousarray(out), (x,), backward)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis, preserving argument order."""
    inputs = list(inputs)
    if not inputs:
        raise ValueError("concat_channels needs at least one tensor")
    for t in inputs:
        _check_4d(t, "concat_channels")
    ref = inputs[0].shape
    for t in inputs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ValueError(
                f"concat_channels: batch/spatial mismatch between {ref} and {t.shape}"
            )
    if len(inputs) == 1:
        return inputs[0]
    out = np.concatenate([t.data for t in inputs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

    def backward(g: np.ndarray):
        return [g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]

    return make_result(out, inputs, backward)


# -- activations ----------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return make_result(out, (x,), lambda g: [g * mask])


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return make_result(out, (x,), lambda g: [g * out * (1 - out)])


# -- elementwise arithmetic and reductions (loss plumbing) -------------------------

def _binary(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    out = a.data + b.data
    return make_result(out, (a, b), lambda g: [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)])


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    out = a.data - b.data
    return make_result(out, (a, b), lambda g: [_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)])


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    out = a.data * b.data

    def backward(g):
        return [_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)]

    return make_result(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    out = a.data / b.data

    def backward(g):
        return [_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * a.data / (b.data * b.data), b.shape)]

    return make_result(out, (a, b), backward)


def log(x: Tensor, eps: float = 0.0) -> Tensor:
    """Natural log of ``max(x, eps)``; the gradient is zero where clamped."""
    safe = np.maximum(x.data, eps) if eps > 0 else x.data
    out = np.log(safe)
    live = x.data >= eps if eps > 0 else True

    return make_result(out, (x,), lambda g: [g / safe * live])


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, shape).copy()]

    return make_result(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return make_result(out, (x,), lambda g: [g.reshape(x.shape)])


def stack_mean(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise arithmetic mean of equally-shaped tensors."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("stack_mean needs at least one tensor")
    total = tensors[0]
    for t in tensors[1:]:
        total = add(total, t)
    return mul(total, 1.0 / len(tensors))
