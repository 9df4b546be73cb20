"""Differentiable primitives over :class:`Tensor`.

Each primitive computes its forward value with numpy and registers a backward
closure. Broadcasting binary ops reduce their incoming gradient back to the
operand shapes.
"""

from __future__ import annotations

import builtins
import math

import numpy as np

from .core import Tensor, as_tensor, make_node
from . import linalg


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, a.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, b.shape) if b.requires_grad else None)
    return make_node(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, b.shape) if b.requires_grad else None)
    return make_node(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,))


def pow(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_node(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_node(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_node(a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)
    return make_node(out, (a,), bw)


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    out = np.where(cond, a.data, b.data)
    return make_node(out, (a, b), lambda g: (
        _unbroadcast(np.where(cond, g, 0.0), a.shape) if a.requires_grad else None,
        _unbroadcast(np.where(cond, 0.0, g), b.shape) if b.requires_grad else None))


# ---------------------------------------------------------------------------
# reductions and shape

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)
    return make_node(out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum(a, axes, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make_node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return make_node(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def expand_dims(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return reshape(a, np.expand_dims(a.data, axis).shape)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return make_node(np.broadcast_to(a.data, shape).copy(), (a,),
                     lambda g: (_unbroadcast(g, a.shape),))


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return builtins.any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]
    advanced = _is_advanced(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)
    return make_node(np.array(out, copy=True), (a,), bw)


def take_along_axis(a, idx: np.ndarray, axis: int) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.ndim
    out = np.take_along_axis(a.data, idx, axis)

    def bw(g):
        full = np.zeros_like(a.data)
        index = list(np.indices(idx.shape, sparse=True))
        index[axis] = idx
        np.add.at(full, tuple(index), g)
        return (full,)
    return make_node(out, (a,), bw)


def scatter_add(values, index: np.ndarray, n: int) -> Tensor:
    """Rows of ``values`` summed into an ``(n, ...)`` result at ``index``.

    Accumulation follows row order, so the result is deterministic.
    """
    values = as_tensor(values)
    out = np.zeros((n,) + values.shape[1:])
    np.add.at(out, index, values.data)
    return make_node(out, (values,), lambda g: (g[index],))


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        sl = [slice(None)] * g.ndim
        res = []
        for i in range(len(ts)):
            sl[axis] = slice(bounds[i], bounds[i + 1])
            res.append(g[tuple(sl)])
        return tuple(res)
    return make_node(out, ts, bw)


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [expand_dims(as_tensor(t), axis) for t in tensors]
    return concat(ts, axis)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch dimensions not broadcastable: {a.shape} x {b.shape}") from None
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # shared weight: fold leading axes into rows so the weight gradient is one GEMM
        a2 = ad.reshape(-1, ad.shape[-1])

        def bw_shared(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb
        return make_node((a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],)), (a, b), bw_shared)

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb
    return make_node(ad @ bd, (a, b), bw)


# ---------------------------------------------------------------------------
# normalisations and softmax

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return make_node(out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    out = x - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)
    return make_node(out, (a,), bw)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """(x - mean) / sqrt(var + eps) over the last axis."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)
    return make_node(y, (a,), bw)


def rms_norm(a, eps: float = 1e-6) -> Tensor:
    a = as_tensor(a)
    x = a.data
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    y = x * inv

    def bw(g):
        return (inv * (g - y * (g * y).mean(axis=-1, keepdims=True)),)
    return make_node(y, (a,), bw)


def zscore(a, eps: float = 1e-6) -> Tensor:
    """(x - mean) / (std + eps) over the last axis; constant rows map to 0."""
    a = as_tensor(a)
    x = a.data
    n = x.shape[-1]
    xc = x - x.mean(axis=-1, keepdims=True)
    s = np.sqrt((xc * xc).mean(axis=-1, keepdims=True))
    den = s + eps
    y = xc / den

    def bw(g):
        gc = g - g.mean(axis=-1, keepdims=True)
        safe = np.where(s > 0, s, 1.0)
        ds = np.where(s > 0, (g * xc).sum(axis=-1, keepdims=True) / (n * safe), 0.0)
        return (gc / den - xc * ds / (den * den),)
    return make_node(y, (a,), bw)


def l2norm(a, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; subgradient 0 at the origin."""
    a = as_tensor(a)
    x = a.data
    n = np.sqrt((x * x).sum(axis=axis))

    def bw(g):
        nk = np.expand_dims(n, axis)
        scale = np.where(nk > 0, 1.0 / np.where(nk > 0, nk, 1.0), 0.0)
        return (np.expand_dims(g, axis) * x * scale,)
    return make_node(n, (a,), bw)


# ---------------------------------------------------------------------------
# convolution / spectra

def unfold1d(a, kernel: int, stride: int = 1, pad: int = 0) -> Tensor:
    """(N, Cin, L) -> (N, Lout, Cin*kernel) patches for strided 1-D convolution."""
    a = as_tensor(a)
    x = a.data
    n, cin, length = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad))) if pad else x
    lp = length + 2 * pad
    if lp < kernel:
        raise DimensionError(f"unfold1d: padded length {lp} shorter than kernel {kernel}")
    lout = (lp - kernel) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, kernel, axis=2)[:, :, ::stride][:, :, :lout]
    out = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(n, lout, cin * kernel)

    def bw(g):
        g4 = g.reshape(n, lout, cin, kernel)
        gp = np.zeros((n, cin, lp))
        stop = stride * (lout - 1) + 1
        for k in range(kernel):
            gp[:, :, k:k + stop:stride] += g4[:, :, :, k].transpose(0, 2, 1)
        return (gp[:, :, pad:pad + length] if pad else gp,)
    return make_node(out, (a,), bw)


def power_spectrum(a, window: np.ndarray) -> Tensor:
    """|rfft(x * window)|^2 along the last axis (length must be a power of two)."""
    a = as_tensor(a)
    xw = a.data * window
    n = xw.shape[-1]
    spec = linalg.rfft(xw)
    out = spec.real ** 2 + spec.imag ** 2

    def bw(g):
        # d|X_k|^2/dx_n = 2 Re(conj(X_k) e^{-2pi i kn/N})  =>  2 N Re(ifft(g_k X_k))
        full = np.zeros(xw.shape[:-1] + (n,), dtype=complex)
        full[..., : n // 2 + 1] = g * spec
        back = 2.0 * n * linalg.ifft(full).real
        return (back * window,)
    return make_node(out, (a,), bw)


# ---------------------------------------------------------------------------
# stochastic / estimator helpers

def dropout(a, p: float, rng, training: bool = True) -> Tensor:
    a = as_tensor(a)
    if not training or p <= 0.0:
        return a
    keep = (rng.uniform(a.shape) >= p) / (1.0 - p)
    return make_node(a.data * keep, (a,), lambda g: (g * keep,))


def straight_through(hard: np.ndarray, soft) -> Tensor:
    """Forward value ``hard`` exactly, gradient routed to ``soft``."""
    soft = as_tensor(soft)
    return make_node(np.array(hard, dtype=np.float64), (soft,), lambda g: (g,))


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data)
