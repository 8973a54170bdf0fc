"""Differentiable operations on :class:`~centermask.tensor.Tensor`.

Layout is NCHW throughout. Each op computes its forward result with numpy and
registers a closure returning one gradient (or ``None``) per parent.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, Tensor

__all__ = [
    "add", "sub", "mul", "power", "sum", "mean", "reshape", "concat",
    "relu", "sigmoid", "log_sigmoid", "abs", "matmul", "linear", "slice_channels",
    "conv2d", "upsample_nearest", "bilinear_resize", "crop", "roi_sample",
    "take", "gather_points", "bce_with_logits", "assembled_bce",
]


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data * b.data, (a, b), backward, "mul")


def power(x: Tensor, exponent: float) -> Tensor:
    out = x.data ** exponent

    def backward(g):
        return (g * exponent * x.data ** (exponent - 1),)

    return Tensor._make(out, (x,), backward, "power")


def abs(x: Tensor) -> Tensor:  # noqa: A001
    def backward(g):
        return (g * np.sign(x.data),)

    return Tensor._make(np.abs(x.data), (x,), backward, "abs")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return Tensor._make(x.data * mask, (x,), backward, "relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # two-branch form avoids overflow in exp for large |z|
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def _log_sigmoid(z: np.ndarray) -> np.ndarray:
    return (np.minimum(z, 0) - np.log1p(np.exp(-np.abs(z)))).astype(z.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward(g):
        return (g * s * (1 - s),)

    return Tensor._make(s, (x,), backward, "sigmoid")


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) computed without overflow."""

    def backward(g):
        return (g * _sigmoid(-x.data),)

    return Tensor._make(_log_sigmoid(x.data), (x,), backward, "log_sigmoid")


# -- reductions and shape ---------------------------------------------------

def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % x.ndim for a in axes)
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape).copy(),)

    return Tensor._make(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return Tensor._make(out, (x,), backward, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, tensors, backward, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner axis mismatch {a.shape[1]} vs {b.shape[0]}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (K, I) and weight (O, I)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        return (gx, gw) if bias is None else (gx, gw, g.sum(axis=0))

    return Tensor._make(out, parents, backward, "linear")


def slice_channels(x: Tensor, start: int, count: int) -> Tensor:
    """Channels ``[start, start+count)`` of an NCHW tensor."""
    if start < 0 or start + count > x.shape[1]:
        raise DimensionError(f"slice_channels: [{start}, {start + count}) outside channel axis {x.shape[1]}")
    out = np.ascontiguousarray(x.data[:, start:start + count])

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, start:start + count] = g
        return (gx,)

    return Tensor._make(out, (x,), backward, "slice_channels")


# -- convolution ------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW batch with an OIKK kernel."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must be NCHW, got ndim={x.ndim}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d: weight must be OIKK, got ndim={weight.ndim}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise DimensionError(f"conv2d: channel axis mismatch, input has {c}, weight expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv2d: bias axis 0 must be {o}, got shape {bias.shape}")
    if h + 2 * padding < kh:
        raise DimensionError(f"conv2d: height axis {h} (+2*{padding}) smaller than kernel {kh}")
    if w + 2 * padding < kw:
        raise DimensionError(f"conv2d: width axis {w} (+2*{padding}) smaller than kernel {kw}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    w2 = weight.data.reshape(o, -1)

    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        cols = np.ascontiguousarray(xs.transpose(0, 2, 3, 1)).reshape(-1, c)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = g2 @ w2
            if kh == 1 and kw == 1 and padding == 0:
                dxs = dcols.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
                if stride > 1:
                    gx = np.zeros(x.shape, dtype=g.dtype)
                    gx[:, :, ::stride, ::stride] = dxs
                else:
                    gx = np.ascontiguousarray(dxs)
            else:
                dcols = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
                gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
                gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._make(out, parents, backward, "conv2d")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return x
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def backward(g):
        s = g.shape
        g = g.reshape(*s[:-2], s[-2] // factor, factor, s[-1] // factor, factor)
        return (g.sum(axis=(-3, -1)),)

    return Tensor._make(out, (x,), backward, "upsample_nearest")


# -- resampling -------------------------------------------------------------

def _linear_taps(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel-centre source taps (i0, i1, frac) for resizing n_in -> n_out."""
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def _lerp_matrix(i0, i1, frac, n_in: int, dtype) -> np.ndarray:
    m = np.zeros((len(i0), n_in), dtype=dtype)
    rows = np.arange(len(i0))
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize the last two axes with align-corners-false bilinear sampling."""
    if x.ndim < 2:
        raise DimensionError(f"bilinear_resize: need at least 2 axes, got {x.shape}")
    h1, w1 = x.shape[-2:]
    if h1 < 1 or w1 < 1:
        raise DimensionError(f"bilinear_resize: empty input spatial size {(h1, w1)}")
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"bilinear_resize: output size {(out_h, out_w)} must be at least 1x1")
    dt = x.dtype
    y0, y1, fy = _linear_taps(h1, out_h)
    x0, x1, fx = _linear_taps(w1, out_w)
    fy_ = fy.astype(dt)[:, None]
    fx_ = fx.astype(dt)
    # a + f*(b - a) keeps constant fields exactly constant
    a = x.data[..., y0, :]
    rows = a + fy_ * (x.data[..., y1, :] - a)
    a = rows[..., x0]
    out = a + fx_ * (rows[..., x1] - a)

    def backward(g):
        my = _lerp_matrix(y0, y1, fy, h1, dt)
        mx = _lerp_matrix(x0, x1, fx, w1, dt)
        return (my.T @ g @ mx,)

    return Tensor._make(out, (x,), backward, "bilinear_resize")


def crop(x: Tensor, y0: int, x0: int, h: int, w: int) -> Tensor:
    """Integer window ``[y0:y0+h, x0:x0+w]`` of the last two axes."""
    H, W = x.shape[-2:]
    if h < 1 or w < 1 or y0 >= H or x0 >= W or y0 + h <= 0 or x0 + w <= 0:
        raise DimensionError(f"crop: window ({y0},{x0},{h},{w}) does not intersect map {H}x{W}")
    if y0 < 0 or x0 < 0 or y0 + h > H or x0 + w > W:
        raise DimensionError(f"crop: window ({y0},{x0},{h},{w}) exceeds map {H}x{W}; clip it first")
    out = x.data[..., y0:y0 + h, x0:x0 + w].copy()

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[..., y0:y0 + h, x0:x0 + w] = g
        return (gx,)

    return Tensor._make(out, (x,), backward, "crop")


def roi_sample(x: Tensor, y0: float, x0: float, h: int, w: int) -> Tensor:
    """Bilinearly sample an ``h x w`` grid at ``(y0 + i, x0 + j)`` on the last two axes.

    Coordinates are in map index units; samples are clamped to the map border.
    With integer ``y0, x0`` inside the map this equals :func:`crop`.
    """
    H, W = x.shape[-2:]
    if h < 1 or w < 1:
        raise DimensionError(f"roi_sample: empty grid {h}x{w}")

    def taps(start, n, size):
        pos = np.clip(start + np.arange(n, dtype=np.float64), 0.0, size - 1)
        i0 = np.floor(pos).astype(np.int64)
        i1 = np.minimum(i0 + 1, size - 1)
        return i0, i1, pos - i0

    iy0, iy1, fy = taps(y0, h, H)
    ix0, ix1, fx = taps(x0, w, W)
    dt = x.dtype
    fy_ = fy.astype(dt)[:, None]
    fx_ = fx.astype(dt)
    a = x.data[..., iy0, :]
    rows = a + fy_ * (x.data[..., iy1, :] - a)
    a = rows[..., ix0]
    out = a + fx_ * (rows[..., ix1] - a)

    def backward(g):
        my = _lerp_matrix(iy0, iy1, fy, H, dt)
        mx = _lerp_matrix(ix0, ix1, fx, W, dt)
        return (my.T @ g @ mx,)

    return Tensor._make(out, (x,), backward, "roi_sample")


def take(x: Tensor, index) -> Tensor:
    """Basic (integer / slice) indexing ``x[index]`` with scatter backward."""
    out = np.ascontiguousarray(x.data[index])

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[index] = g
        return (gx,)

    return Tensor._make(out, (x,), backward, "take")


def gather_points(x: Tensor, batch: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> Tensor:
    """Pick feature vectors ``x[b, :, y, x]`` of an NCHW tensor -> (K, C)."""
    batch = np.asarray(batch, dtype=np.int64)
    ys = np.asarray(ys, dtype=np.int64)
    xs = np.asarray(xs, dtype=np.int64)
    n, c, H, W = x.shape
    if len(ys) and (ys.min() < 0 or ys.max() >= H or xs.min() < 0 or xs.max() >= W):
        raise IndexError(f"gather_points: index outside {H}x{W} map")
    out = x.data[batch, :, ys, xs]

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, (batch, slice(None), ys, xs), g)
        return (gx,)

    return Tensor._make(out.reshape(len(ys), c), (x,), backward, "gather_points")


# -- fused losses -----------------------------------------------------------

def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Elementwise binary cross entropy of sigmoid(logits) against ``target``."""
    t = np.asarray(target, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise DimensionError(f"bce_with_logits: target shape {t.shape} != logits shape {logits.shape}")
    z = logits.data
    out = -(t * _log_sigmoid(z) + (1 - t) * _log_sigmoid(-z))

    def backward(g):
        return (g * (_sigmoid(z) - t),)

    return Tensor._make(out, (logits,), backward, "bce_with_logits")


def assembled_bce(a: Tensor, b: Tensor, target) -> Tensor:
    """Elementwise BCE of ``m = sigmoid(a) * sigmoid(b)`` against ``target``.

    ``log(1 - m)`` is evaluated as ``logsumexp(-a, -b, -a-b) + log_sig(a) + log_sig(b)``
    so saturated logits stay finite.
    """
    t = np.asarray(target, dtype=a.dtype)
    if a.shape != b.shape or t.shape != a.shape:
        raise DimensionError(f"assembled_bce: shapes {a.shape}, {b.shape}, target {t.shape} differ")
    za, zb = a.data, b.data
    lsa, lsb = _log_sigmoid(za), _log_sigmoid(zb)
    log_m = lsa + lsb
    stack = np.stack([-za, -zb, -za - zb])
    top = stack.max(axis=0)
    log_1m = top + np.log(np.exp(stack - top).sum(axis=0)) + log_m
    out = -(t * log_m + (1 - t) * log_1m)

    def backward(g):
        # d/da = -(1 - sig(a)) * (t - m) / (1 - m), with (t - m)/(1 - m) = 1 - (1 - t)/(1 - m)
        ratio = 1 - (1 - t) * np.exp(-log_1m)
        ga = -g * _sigmoid(-za) * ratio if a.requires_grad else None
        gb = -g * _sigmoid(-zb) * ratio if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), backward, "assembled_bce")

