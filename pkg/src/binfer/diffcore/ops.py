"""Differentiable operations.

Every op accepts Tensors, numpy arrays or Python scalars. When no input is a
Tensor the op simply returns the numpy result, so model code runs unchanged
with or without a tape.
"""
from __future__ import annotations

import math

import numpy as np

from .tape import NonFiniteError, Tensor

__all__ = [
    "add", "sub", "mul", "div", "neg", "power", "square", "sqrt",
    "matmul", "affine", "relu", "tanh", "exp", "log", "softplus", "sigmoid",
    "sum", "mean", "log_sum_exp", "softmax", "log_softmax",
    "gather", "getitem", "concat", "reshape", "transpose", "clip",
    "solve", "logdet", "value_of",
]


def value_of(x) -> np.ndarray:
    if type(x) is Tensor:
        return x.data
    if type(x) is np.ndarray and x.dtype == np.float64:
        return x
    return np.asarray(x, dtype=np.float64)


def _emit(op, value, inputs, vjp):
    if type(value) is not np.ndarray:
        value = np.asarray(value, dtype=np.float64)
    # a finite sum implies finite entries; fall back to the full scan otherwise
    if not math.isfinite(value.sum()) and not np.isfinite(value).all():
        raise NonFiniteError(f"non-finite output from {op}")
    tape = None
    for x in inputs:
        if type(x) is Tensor:
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("inputs live on different tapes")
    if tape is None:
        return value
    parents = tuple(x.id if type(x) is Tensor else None for x in inputs)
    return tape.record(op, value, parents, vjp)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    av, bv = value_of(a), value_of(b)
    return _emit("add", av + bv, (a, b),
                 lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    return _emit("sub", av - bv, (a, b),
                 lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _emit("mul", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def neg(a):
    return _emit("neg", -value_of(a), (a,), lambda g: (-g,))


def power(a, p: float):
    av = value_of(a)
    p = float(p)
    if p == 2.0:
        return square(a)
    return _emit("power", av ** p, (a,), lambda g: (g * p * av ** (p - 1.0),))


def square(a):
    av = value_of(a)
    return _emit("square", av * av, (a,), lambda g: (2.0 * g * av,))


def sqrt(a):
    out = np.sqrt(value_of(a))
    return _emit("sqrt", out, (a,), lambda g: (0.5 * g / out,))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.ndim == 0 or bv.ndim == 0:
        raise ValueError("matmul needs arrays of rank >= 1")
    if av.shape[-1] != bv.shape[0 if bv.ndim == 1 else -2]:
        raise ValueError(f"matmul shape mismatch {av.shape} @ {bv.shape}")

    def vjp(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if bv.ndim == 1:
            return np.multiply.outer(g, bv), av.T @ g if av.ndim == 2 else None
        if av.ndim == 1:
            return bv @ g, np.multiply.outer(av, g)
        return g @ bv.T, av.T @ g

    return _emit("matmul", av @ bv, (a, b), vjp)


def affine(x, theta, w_offset: int, w_shape: tuple, b_offset: int):
    """x @ W.T + b with W, b read from slices of the flat vector ``theta``.

    W occupies ``theta[w_offset : w_offset + fan_out * fan_in]`` row-major as
    (fan_out, fan_in); b the next ``fan_out`` entries from ``b_offset``.
    """
    xv, tv = value_of(x), value_of(theta)
    fan_out, fan_in = w_shape
    n_w = fan_out * fan_in
    w = tv[w_offset:w_offset + n_w].reshape(w_shape)
    b = tv[b_offset:b_offset + fan_out]
    if xv.shape[-1] != fan_in:
        raise ValueError(f"affine input has {xv.shape[-1]} features, expected {fan_in}")

    def vjp(g):
        gt = np.zeros_like(tv)
        if xv.ndim == 1:
            gt[w_offset:w_offset + n_w] = np.outer(g, xv).ravel()
            gt[b_offset:b_offset + fan_out] = g
        else:
            gt[w_offset:w_offset + n_w] = (g.T @ xv).ravel()
            gt[b_offset:b_offset + fan_out] = g.sum(axis=0)
        return g @ w, gt

    return _emit("affine", xv @ w.T + b, (x, theta), vjp)


def transpose(a):
    return _emit("transpose", value_of(a).T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    av = value_of(a)
    return _emit("reshape", av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def solve(a, b):
    """Solution of a @ x = b for square a."""
    av, bv = value_of(a), value_of(b)
    x = np.linalg.solve(av, bv)

    def vjp(g):
        gb = np.linalg.solve(av.T, g)
        ga = -np.outer(gb, x) if x.ndim == 1 else -gb @ x.T
        return ga, gb

    return _emit("solve", x, (a, b), vjp)


def logdet(a):
    """log|det a| for a square, non-singular matrix."""
    av = value_of(a)
    sign, ld = np.linalg.slogdet(av)
    if sign == 0:
        raise np.linalg.LinAlgError("singular matrix in logdet")
    return _emit("logdet", ld, (a,), lambda g: (g * np.linalg.inv(av).T,))


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(a):
    av = value_of(a)
    mask = av > 0.0
    return _emit("relu", np.where(mask, av, 0.0), (a,), lambda g: (g * mask,))


def tanh(a):
    out = np.tanh(value_of(a))
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a):
    out = np.exp(value_of(a))
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a):
    av = value_of(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _emit("log", out, (a,), lambda g: (g / av,))


def softplus(a):
    av = value_of(a)
    out = np.logaddexp(0.0, av)
    return _emit("softplus", out, (a,), lambda g: (g * _sigmoid(av),))


def _sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out = _sigmoid(np.atleast_1d(value_of(a))).reshape(np.shape(value_of(a)))
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def clip(a, lo: float, hi: float):
    av = value_of(a)
    inside = (av >= lo) & (av <= hi)
    return _emit("clip", np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _expand(g, shape, axis):
    if axis is None:
        return np.full(shape, g)
    if axis < 0:
        axis += len(shape)
    return np.broadcast_to(g.reshape(shape[:axis] + (1,) + shape[axis + 1:]), shape)


def sum(a, axis=None):  # noqa: A001 - mirrors numpy
    av = value_of(a)
    return _emit("sum", av.sum(axis=axis), (a,), lambda g: (_expand(g, av.shape, axis),))


def mean(a, axis=None):
    av = value_of(a)
    n = av.size if axis is None else av.shape[axis]
    return _emit("mean", av.mean(axis=axis), (a,), lambda g: (_expand(g, av.shape, axis) / n,))


def log_sum_exp(a, axis=None):
    """Shift-stabilised log sum exp along ``axis`` (all entries if None)."""
    av = value_of(a)
    m = av.max(axis=axis, keepdims=True)
    e = np.exp(av - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s
    out = out.reshape(()) if axis is None else np.squeeze(out, axis=axis)
    return _emit("log_sum_exp", out, (a,), lambda g: (_expand(g, av.shape, axis) * soft,))


def softmax(a, axis=-1):
    av = value_of(a)
    e = np.exp(av - av.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (a,), vjp)


def log_softmax(a, axis=-1):
    av = value_of(a)
    z = av - av.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)
    return _emit("log_softmax", out, (a,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


# ---------------------------------------------------------------------------
# indexing and assembly
# ---------------------------------------------------------------------------

def getitem(a, idx):
    """Basic or advanced numpy indexing; adjoints scatter-add back."""
    av = value_of(a)
    out = av[idx]
    basic = isinstance(idx, (slice, int)) or (
        isinstance(idx, tuple) and all(isinstance(i, (slice, int)) for i in idx))

    def vjp(g):
        full = np.zeros_like(av)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _emit("getitem", np.array(out), (a,), vjp)


def gather(a, index, axis=0):
    """Take entries of ``a`` at integer ``index`` along ``axis``."""
    av = value_of(a)
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < -av.shape[axis] or index.max() >= av.shape[axis]):
        raise IndexError("gather index out of range")
    out = np.take(av, index, axis=axis)

    def vjp(g):
        full = np.zeros_like(av)
        sl = [slice(None)] * av.ndim
        sl[axis] = index
        np.add.at(full, tuple(sl), g)
        return (full,)

    return _emit("gather", out, (a,), vjp)


def concat(items, axis=0):
    vals = [value_of(x) for x in items]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, tuple(items), vjp)
