"""Differentiable operators on (batch, channel, height, width) tensors."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, make_result


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*k*k, H*W) zero-padded patch columns."""
    n, c, h, w = x.shape
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = np.empty((n, c, k, k, h, w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(n, c * k * k, h * w)


def _conv_forward(x: np.ndarray, w: np.ndarray, cols: np.ndarray | None = None) -> np.ndarray:
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    if cols is None:
        cols = _im2col(x, k)
    out = np.matmul(w.reshape(o, c * k * k), cols)
    return out.reshape(n, o, h, wd)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 cross-correlation with zero "same" padding.

    ``weight`` is (out_ch, in_ch, k, k) with odd k; ``bias`` is (out_ch,).
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be rank 4, got shape {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: weight must be (out_ch, in_ch, k, k), got {weight.shape}")
    o, c, k, _ = weight.shape
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    if x.shape[1] != c:
        raise ShapeError(f"conv2d: input channel dimension is {x.shape[1]}, weight expects in_ch={c}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias dimension {bias.shape} does not match out_ch={o}")

    xd, wdat = x.data, weight.data
    cols = _im2col(xd, k)
    out = _conv_forward(xd, wdat, cols)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    def back(g: np.ndarray):
        gx = gw = gb = None
        if x.requires_grad:
            # Same-padding transpose conv: flip spatially, swap in/out.
            wt = np.ascontiguousarray(wdat[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx = np.ascontiguousarray(_conv_forward(g, wt))
        if weight.requires_grad:
            n = xd.shape[0]
            gflat = g.reshape(n, o, -1)
            gw = np.matmul(gflat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(o, c, k, k)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, back)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    return make_result(a.data * s, (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def clamp01(a: Tensor) -> Tensor:
    # Zero gradient at and beyond saturation.
    inside = (a.data > 0) & (a.data < 1)
    return make_result(np.clip(a.data, 0, 1), (a,), lambda g: (g * inside,))


_BINARY = {"add": add, "sub": sub, "mul": mul}
_UNARY = {"relu": relu, "clamp01": clamp01}


def elementwise(kind: str, a: Tensor, b: Tensor | float | None = None) -> Tensor:
    """Dispatch by name: add, sub, mul, relu, scale, clamp01.

    ``scale`` takes a plain number as ``b``.
    """
    if kind in _BINARY:
        if not isinstance(b, Tensor):
            raise ShapeError(f"{kind} needs a second tensor operand")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind == "scale":
        return scale(a, float(b))
    raise ValueError(f"unknown elementwise kind {kind!r}")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels: operands must be rank 4")
    for axis, name in ((0, "batch"), (2, "height"), (3, "width")):
        if a.shape[axis] != b.shape[axis]:
            raise ShapeError(
                f"concat_channels: {name} mismatch {a.shape[axis]} vs {b.shape[axis]}"
            )
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return make_result(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    def back(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return make_result(a.data[:, start:stop].copy(), (a,), back)


def reduce(kind: str, x: Tensor) -> Tensor:
    """Scalar sum or mean over every element."""
    n = x.data.size
    if n == 0:
        raise ShapeError("reduce: empty tensor")
    total = x.data.sum(dtype=x.dtype)
    if kind == "sum":
        return make_result(total, (x,), lambda g: (np.full_like(x.data, g),))
    if kind == "mean":
        inv = x.dtype.type(1.0 / n)
        return make_result(total / x.dtype.type(n), (x,), lambda g: (np.full_like(x.data, g * inv),))
    raise ValueError(f"unknown reduction {kind!r}")


def mean(x: Tensor) -> Tensor:
    return reduce("mean", x)


def sum_(x: Tensor) -> Tensor:
    return reduce("sum", x)
