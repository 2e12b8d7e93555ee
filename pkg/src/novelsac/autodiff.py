"""Small reverse-mode autodiff over float64 numpy arrays.

Every op in this module accepts either plain ``np.ndarray`` values or
:class:`Tensor` objects.  With arrays the op is evaluated directly and
nothing is recorded, which keeps inference paths (environment stepping,
TD targets, rejection sampling) cheap.  When any input is a ``Tensor`` that
requires grad, the result is a ``Tensor`` linked to its parents and
:meth:`Tensor.backward` walks the graph in reverse topological order.

Both paths run the same numpy expressions, so their values agree bit for bit.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class StructuralError(ValueError):
    """Shape or arity problem in a graph computation."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> np.ndarray:
        return self.data

    def backward(self) -> None:
        if self.data.size != 1:
            raise StructuralError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def __pow__(self, p):
        if p != 2:
            raise StructuralError("only squaring is supported")
        return square(self)


def _val(x):
    return x.data if isinstance(x, Tensor) else x


def _tracked(*xs) -> bool:
    return any(isinstance(x, Tensor) and x.requires_grad for x in xs)


def _node(data: np.ndarray, parents: Sequence, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = True
    out._parents = tuple(p if isinstance(p, Tensor) else Tensor(p) for p in parents)
    out._backward = backward
    out.name = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def as_array(x) -> np.ndarray:
    return np.asarray(_val(x), dtype=np.float64)


# elementwise binary ops

def add(a, b):
    av, bv = _val(a), _val(b)
    out = av + bv
    if not _tracked(a, b):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _node(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    av, bv = _val(a), _val(b)
    out = av - bv
    if not _tracked(a, b):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _node(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    av, bv = _val(a), _val(b)
    out = av * bv
    if not _tracked(a, b):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _node(out, (a, b), lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)))


def div(a, b):
    av, bv = _val(a), _val(b)
    out = av / bv
    if not _tracked(a, b):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, sa), _unbroadcast(-g * av / (bv * bv), sb)),
    )


def minimum(a, b):
    """Elementwise min; ties send the gradient to ``a``."""
    av, bv = _val(a), _val(b)
    out = np.minimum(av, bv)
    if not _tracked(a, b):
        return out
    pick_a = av <= bv
    sa, sb = np.shape(av), np.shape(bv)
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), sa), _unbroadcast(np.where(pick_a, 0.0, g), sb)),
    )


# unary ops

def neg(a):
    out = -_val(a)
    if not _tracked(a):
        return out
    return _node(out, (a,), lambda g: (-g,))


def square(a):
    av = _val(a)
    out = av * av
    if not _tracked(a):
        return out
    return _node(out, (a,), lambda g: (2.0 * av * g,))


def tanh(a):
    out = np.tanh(_val(a))
    if not _tracked(a):
        return out
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a):
    out = np.exp(_val(a))
    if not _tracked(a):
        return out
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    av = _val(a)
    out = np.log(av)
    if not _tracked(a):
        return out
    return _node(out, (a,), lambda g: (g / av,))


def softplus(a):
    """log(1 + exp(a)), overflow-safe."""
    av = _val(a)
    out = np.logaddexp(0.0, av)
    if not _tracked(a):
        return out
    return _node(out, (a,), lambda g: (g * (0.5 * (1.0 + np.tanh(0.5 * av))),))


def atanh(a):
    av = _val(a)
    out = np.arctanh(av)
    if not _tracked(a):
        return out
    return _node(out, (a,), lambda g: (g / (1.0 - av * av),))


def clip(a, lo: float, hi: float):
    """Clamp to [lo, hi]; gradient is zero where the clamp is active."""
    av = _val(a)
    out = np.clip(av, lo, hi)
    if not _tracked(a):
        return out
    inside = (av >= lo) & (av <= hi)
    return _node(out, (a,), lambda g: (np.where(inside, g, 0.0),))


# reductions and structure

def sum(a, axis=None, keepdims: bool = False):  # noqa: A001 - mirrors numpy
    av = _val(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    if not _tracked(a):
        return out
    shape = av.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(out), (a,), back)


def mean(a, axis=None):
    av = _val(a)
    n = av.size if axis is None else av.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise StructuralError(f"matmul shape mismatch {av.shape} @ {bv.shape}")
    out = av @ bv
    if not _tracked(a, b):
        return out
    return _node(out, (a, b), lambda g: (g @ bv.T, av.T @ g))


def linear(x, weight, bias):
    """Fused ``x @ weight.T + bias`` for weight stored as [out, in]."""
    xv, wv, bv = _val(x), _val(weight), _val(bias)
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[1] or bv.shape != (wv.shape[0],):
        raise StructuralError(
            f"linear shape mismatch: input {xv.shape}, weight {wv.shape}, bias {bv.shape}"
        )
    out = xv @ wv.T + bv
    if not _tracked(x, weight, bias):
        return out
    return _node(out, (x, weight, bias), lambda g: (g @ wv, g.T @ xv, g.sum(axis=0)))


def concat(parts: Sequence, axis: int = -1):
    vals = [_val(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if not _tracked(*parts):
        return out
    edges = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _node(out, parts, lambda g: tuple(np.split(g, edges, axis=axis)))


def getitem(a, index):
    av = _val(a)
    out = av[index]
    if not _tracked(a):
        return out
    shape = av.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _node(out, (a,), back)


def gate(a, mask):
    """Multiply by a constant mask; the mask never receives gradient."""
    return mul(a, np.asarray(mask, dtype=np.float64))
