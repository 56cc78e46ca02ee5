"""Differentiable ops.  Each public op is registered in ``OPS`` so the test
suite can finite-difference every one of them."""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, make_result

OPS: dict[str, Callable] = {}

MASK_FILL = -1e30


def register(name: str):
    def deco(fn):
        OPS[name] = fn
        return fn
    return deco


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _bshape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary -------------------------------------------------------

@register("add")
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return make_result("add", a.data + b.data, (a, b), bw)


@register("sub")
def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return make_result("sub", a.data - b.data, (a, b), bw)


@register("mul")
def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return make_result("mul", a.data * b.data, (a, b), bw)


@register("div")
def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("div", a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)
    return make_result("div", out, (a, b), bw)


@register("scale")
def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return make_result("scale", x.data * c, (x,), lambda g: (g * c,))


@register("matmul")
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return make_result("matmul", a.data @ b.data, (a, b), bw)


# -- elementwise unary --------------------------------------------------------

def _unary(op: str, x, fwd, dfwd) -> Tensor:
    x = as_tensor(x)
    out = fwd(x.data)
    return make_result(op, out, (x,), lambda g: (g * dfwd(x.data, out),))


@register("relu")
def relu(x) -> Tensor:
    return _unary("relu", x, lambda v: np.maximum(v, 0.0), lambda v, o: (v > 0).astype(np.float64))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@register("gelu")
def gelu(x) -> Tensor:
    """Exact (erf) GELU."""
    def fwd(v):
        return 0.5 * v * (1.0 + erf(v * _INV_SQRT2))

    def dfwd(v, o):
        return 0.5 * (1.0 + erf(v * _INV_SQRT2)) + v * np.exp(-0.5 * v * v) * _INV_SQRT2PI
    return _unary("gelu", x, fwd, dfwd)


@register("sin")
def sin(x) -> Tensor:
    return _unary("sin", x, np.sin, lambda v, o: np.cos(v))


@register("cos")
def cos(x) -> Tensor:
    return _unary("cos", x, np.cos, lambda v, o: -np.sin(v))


@register("exp")
def exp(x) -> Tensor:
    return _unary("exp", x, np.exp, lambda v, o: o)


@register("sqrt")
def sqrt(x) -> Tensor:
    return _unary("sqrt", x, np.sqrt, lambda v, o: 0.5 / o)


@register("square")
def square(x) -> Tensor:
    return _unary("square", x, np.square, lambda v, o: 2.0 * v)


# Below this squared angle the closed forms lose precision; switch to series.
_SERIES_SQ = 1e-6


def _sinc_parts(s: np.ndarray):
    small = s < _SERIES_SQ
    a = np.sqrt(np.where(small, 1.0, s))
    val = np.where(small, 1.0 - s / 6.0 + s * s / 120.0 - s ** 3 / 5040.0, np.sin(a) / a)
    der = np.where(small, -1.0 / 6.0 + s / 60.0 - s * s / 2520.0,
                   (a * np.cos(a) - np.sin(a)) / (2.0 * a ** 3))
    return val, der


def _versine_parts(s: np.ndarray):
    small = s < _SERIES_SQ
    a = np.sqrt(np.where(small, 1.0, s))
    half = np.sin(0.5 * a)
    one_minus_cos = 2.0 * half * half
    val = np.where(small, 0.5 - s / 24.0 + s * s / 720.0 - s ** 3 / 40320.0, one_minus_cos / np.where(small, 1.0, s))
    der = np.where(small, -1.0 / 24.0 + s / 360.0 - s * s / 13440.0,
                   (a * np.sin(a) - 2.0 * one_minus_cos) / (2.0 * a ** 4))
    return val, der


@register("sinc_sq")
def sinc_sq(s) -> Tensor:
    """sin(a)/a as a function of s = a**2 (s >= 0); smooth at s = 0."""
    s = as_tensor(s)
    val, der = _sinc_parts(s.data)
    return make_result("sinc_sq", val, (s,), lambda g: (g * der,))


@register("versine_sq")
def versine_sq(s) -> Tensor:
    """(1 - cos a)/a**2 as a function of s = a**2 (s >= 0); smooth at s = 0."""
    s = as_tensor(s)
    val, der = _versine_parts(s.data)
    return make_result("versine_sq", val, (s,), lambda g: (g * der,))


# -- shape ops ----------------------------------------------------------------

@register("reshape")
def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return make_result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


@register("transpose")
def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: bad axes {axes} for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return make_result("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x, a: int, b: int) -> Tensor:
    axes = list(range(as_tensor(x).ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


@register("index")
def index(x, idx) -> Tensor:
    x = as_tensor(x)
    if isinstance(idx, Tensor):
        raise TypeError("index: use integer arrays, not Tensors")
    try:
        out = x.data[idx]
    except IndexError as err:
        raise ShapeError(f"index: {err} for shape {x.shape}") from None

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)
    return make_result("index", np.array(out, dtype=np.float64, copy=True), (x,), bw)


@register("concat")
def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: no operands")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts)))
    return make_result("concat", np.concatenate([t.data for t in ts], axis=ax), ts, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    nd = ts[0].ndim + 1
    ax = axis % nd
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in ts]
    return concat(expanded, axis=ax)


# -- reductions ---------------------------------------------------------------

@register("sum")
def sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return make_result("sum", np.asarray(out, dtype=np.float64), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


@register("mse")
def mse(a, b) -> Tensor:
    """Mean squared error over all elements (scalar)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ, {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        d = (2.0 / n) * diff * g
        return d, -d
    return make_result("mse", np.asarray(np.mean(diff * diff)), (a, b), bw)


# -- neural-net ops -----------------------------------------------------------

@register("softmax")
def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    return make_result("softmax", y, (x,), bw)


@register("layer_norm")
def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Affine-free normalization over the last axis."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)
    return make_result("layer_norm", xhat, (x,), bw)


@register("masked_fill")
def masked_fill(x, mask, value: float = MASK_FILL) -> Tensor:
    """Replace entries where ``mask`` is True with ``value`` (no gradient there)."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    try:
        m = np.broadcast_to(mask, x.shape)
    except ValueError:
        raise ShapeError(f"masked_fill: mask {mask.shape} does not broadcast to {x.shape}") from None
    out = np.where(m, float(value), x.data)
    return make_result("masked_fill", out, (x,), lambda g: (np.where(m, 0.0, g),))


@register("conv1d")
def conv1d(x, w, b=None, stride: int = 1) -> Tensor:
    """Strided 1-D convolution.  x: (C_in, L), w: (C_out, C_in, K), b: (C_out,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 3 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernel {w.shape}")
    c_out, c_in, k = w.shape
    if x.shape[1] < k:
        raise ShapeError(f"conv1d: input length {x.shape[1]} shorter than kernel {k}")
    stride = int(stride)
    cols = sliding_window_view(x.data, k, axis=1)[:, ::stride, :]  # (C_in, L_out, K)
    l_out = cols.shape[1]
    cols2 = np.ascontiguousarray(cols.transpose(1, 0, 2)).reshape(l_out, c_in * k)
    w2 = w.data.reshape(c_out, c_in * k)
    out = (cols2 @ w2.T).T
    inputs: tuple[Tensor, ...] = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (c_out,):
            raise ShapeError(f"conv1d: bias {b.shape} does not match {c_out} output channels")
        out = out + b.data[:, None]
        inputs = (x, w, b)

    def bw(g):
        gw = (g @ cols2).reshape(w.shape)
        gcols = (g.T @ w2).reshape(l_out, c_in, k)
        gx = np.zeros_like(x.data)
        span = stride * (l_out - 1) + 1
        for j in range(k):
            gx[:, j:j + span:stride] += gcols[:, :, j].T
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=1))
        return tuple(grads)
    return make_result("conv1d", np.ascontiguousarray(out), inputs, bw)


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear-interpolation weights mapping n_in samples onto n_out (endpoints to endpoints)."""
    w = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        w[:, 0] = 1.0
        return w
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    w[rows, lo] = 1.0 - frac
    w[rows, lo + 1] += frac
    return w


@register("interp_time")
def interp_time(x, n_out: int) -> Tensor:
    """Linearly resample along axis 0 to ``n_out`` rows."""
    x = as_tensor(x)
    if x.ndim < 1 or n_out < 1:
        raise ShapeError(f"interp_time: bad input {x.shape} -> {n_out}")
    w = interp_matrix(x.shape[0], int(n_out))
    flat = x.data.reshape(x.shape[0], -1)
    out = (w @ flat).reshape((int(n_out),) + x.shape[1:])

    def bw(g):
        return ((w.T @ g.reshape(g.shape[0], -1)).reshape(x.shape),)
    return make_result("interp_time", out, (x,), bw)


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


__all__ = [name for name in OPS] + ["stack", "mean", "swapaxes", "linear", "interp_matrix", "OPS", "MASK_FILL"]
