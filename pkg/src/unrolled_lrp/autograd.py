"""Minimal tape-free reverse-mode autodiff over numpy arrays.

Each op returns a :class:`Var` holding its value, its parents and a closure
mapping the output gradient to parent gradients.  Only what the models need is
here; every op's derivative is written out by hand.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import functional as F


class Var:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents: Sequence["Var"] = (),
                 backward: Callable | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Var(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def backward(self, grad=None) -> None:
        backward(self, grad)


def _wrap(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))


def _node(data, parents, backward) -> Var:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Var(data, True, parents, backward)
    return Var(data)


def detach(x: Var) -> Var:
    return Var(x.data)


def backward(root: Var, grad=None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if not root.requires_grad:
        return
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(root): np.ones_like(root.data) if grad is None else np.asarray(grad, dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Var) -> Var:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def sum_(a: Var, axis=None) -> Var:
    axes = tuple(range(a.data.ndim)) if axis is None else tuple(np.atleast_1d(axis))
    out = a.data.sum(axis=axes)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)
    return _node(out, (a,), bw)


def reshape(a: Var, shape) -> Var:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(xs: Sequence[Var], axis: int = 1) -> Var:
    xs = [_wrap(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _node(np.concatenate([x.data for x in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def relu(a: Var) -> Var:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    """``x @ w.T (+ b)`` for ``x`` of shape (N, in) and ``w`` of shape (out, in)."""
    parents = (x, w) if b is None else (x, w, b)
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def bw(g):
        grads = (g @ w.data if x.requires_grad else None, g.T @ x.data)
        return grads if b is None else grads + (g.sum(axis=0),)
    return _node(out, parents, bw)


def conv2d(x: Var, w: Var, b: Var | None = None, stride: int = 1, pad: int = 0) -> Var:
    parents = (x, w) if b is None else (x, w, b)
    out = F.conv2d(x.data, w.data, None if b is None else b.data, stride, pad)

    def bw(g):
        gx = F.conv2d_grad_input(g, w.data, x.shape, stride, pad) if x.requires_grad else None
        gw = F.conv2d_grad_weight(x.data, g, w.shape, stride, pad) if w.requires_grad else None
        grads = (gx, gw)
        return grads if b is None else grads + (g.sum(axis=(0, 2, 3)),)
    return _node(out, parents, bw)


def global_avg_pool(x: Var) -> Var:
    n, c, h, w = x.shape
    return _node(x.data.mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))


def maxpool2d(x: Var, kernel: int, stride: int):
    y, switches = F.maxpool2d(x.data, kernel, stride)
    return _node(y, (x,), lambda g: (F.unpool2d(g, switches, x.shape),)), switches


def unpool2d(y: Var, switches: np.ndarray, out_shape) -> Var:
    """Switch-driven unpooling; its adjoint gathers at the switch positions."""
    n, c, h, w = out_shape
    idx = switches.reshape(n, c, -1)

    def bw(g):
        return (np.take_along_axis(g.reshape(n, c, -1), idx, axis=2).reshape(y.shape),)
    return _node(F.unpool2d(y.data, switches, out_shape), (y,), bw)


def upsample_nearest(x: Var, factor: int) -> Var:
    return _node(F.upsample_nearest(x.data, factor), (x,),
                 lambda g: (F.upsample_nearest_grad(g, factor),))


def dilate(x: Var, stride: int) -> Var:
    if stride == 1:
        return x
    return _node(F.dilate(x.data, stride), (x,), lambda g: (g[:, :, ::stride, ::stride].copy(),))


def pad_or_crop(x: Var, bottom: int, right: int, top: int = 0, left: int = 0) -> Var:
    """Zero-pad (positive) or crop (negative) each spatial border."""
    data = x.data
    h, w = data.shape[2:]
    src = (slice(max(-top, 0), h - max(-bottom, 0)), slice(max(-left, 0), w - max(-right, 0)))
    core = data[:, :, src[0], src[1]]
    out = np.pad(core, ((0, 0), (0, 0), (max(top, 0), max(bottom, 0)), (max(left, 0), max(right, 0))))
    ho, wo = core.shape[2:]
    dst = (slice(max(top, 0), max(top, 0) + ho), slice(max(left, 0), max(left, 0) + wo))

    def bw(g):
        gx = np.zeros_like(data)
        gx[:, :, src[0], src[1]] = g[:, :, dst[0], dst[1]]
        return (gx,)
    return _node(out, (x,), bw)


def tied_kernel(w: Var, flip: bool = True) -> Var:
    """Decoder kernel aliasing an encoder conv kernel.

    The decoder's ``k``-th filter stacks the ``k``-th input slices of every
    encoder filter, mirrored in both spatial directions.
    """
    def view(a):
        a = a.swapaxes(0, 1)
        return a[:, :, ::-1, ::-1] if flip else a

    return _node(np.ascontiguousarray(view(w.data)), (w,),
                 lambda g: (np.ascontiguousarray(view(g)),))


def heaviside_gate(p: Var, z: Var) -> Var:
    """``p * H(z)``; the Heaviside has zero derivative, so z receives zeros."""
    mask = (z.data > 0).astype(np.float64)
    return _node(p.data * mask, (p, z),
                 lambda g: (_unbroadcast(g * mask, p.shape), np.zeros(z.shape) if z.requires_grad else None))


def stabilized_ratio(x: Var, epsilon: float) -> Var:
    """``x / (x + sign(x) * eps)`` with ``sign(0) = +1`` and ``0/0 := 0``."""
    s = np.where(x.data >= 0, 1.0, -1.0)
    d = x.data + s * epsilon
    safe = np.where(d == 0, 1.0, d)
    val = np.where(d == 0, 0.0, x.data / safe)
    deriv = np.where(d == 0, 0.0, s * epsilon / safe ** 2)
    return _node(val, (x,), lambda g: (g * deriv,))


def custom(fn_value_grad, x: Var, *args) -> Var:
    """Wrap a numpy ``(value, grad)`` function of ``x`` as a scalar op."""
    val, grad = fn_value_grad(x.data, *args)
    return _node(np.asarray(val, dtype=np.float64), (x,), lambda g: (g * grad,))
