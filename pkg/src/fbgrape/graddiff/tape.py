"""Reverse-mode differentiation over dense complex numpy arrays.

A :class:`Tape` records :class:`Node` objects in creation order; the order is a
valid topological order, so :meth:`Tape.backward` is a single reversed sweep.

Gradient convention: for a real scalar loss ``L`` and a node ``z = x + iy`` the
stored gradient is ``dL/dx + i dL/dy``, so ``dL = Re sum(conj(G) * dz)``. Real
leaves therefore receive real gradients.

The module-level functions (``cos``, ``trace``, ``dag`` ...) accept either
plain arrays or nodes, which lets the physics code run unchanged with or
without a tape.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class TapeError(RuntimeError):
    """Raised for unsupported operations or non-finite adjoints."""


class Tape:
    """Append-only record of differentiable operations."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def leaf(self, value, name: str = "leaf") -> "Node":
        return Node(self, np.asarray(value), (), None, name)

    def backward(self, out: "Node", seed=None) -> None:
        """Accumulate gradients of ``out`` into every node reachable from it."""
        if out.tape is not self:
            raise TapeError("output node belongs to a different tape")
        for node in self.nodes:
            node.grad = None
        if seed is None:
            if out.value.size != 1:
                raise TapeError("seed required for non-scalar output")
            seed = np.ones_like(out.value, dtype=float)
        out.grad = np.asarray(seed)
        stop = out.index
        for node in reversed(self.nodes[: stop + 1]):
            g = node.grad
            if g is None or node.vjp is None:
                continue
            parent_grads = node.vjp(g)
            for parent, pg in zip(node.parents, parent_grads):
                if parent is None or pg is None:
                    continue
                if not np.all(np.isfinite(pg)):
                    raise TapeError(f"non-finite adjoint flowing into node '{parent.name}' "
                                    f"from '{node.name}'")
                if not np.iscomplexobj(parent.value) and np.iscomplexobj(pg):
                    pg = pg.real
                pg = _unbroadcast(pg, parent.value.shape)
                parent.grad = pg if parent.grad is None else parent.grad + pg


class Node:
    __slots__ = ("tape", "value", "parents", "vjp", "name", "grad", "index")
    __array_priority__ = 1000

    def __init__(self, tape: Tape, value: np.ndarray, parents, vjp, name: str) -> None:
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.grad = None
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    # -- array-like surface -------------------------------------------------
    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def real(self):
        return real(self)

    @property
    def imag(self):
        return imag(self)

    def conj(self):
        return conj(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __repr__(self) -> str:
        return f"Node({self.name}, shape={self.value.shape}, dtype={self.value.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(neg(self), other)

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

    def __pow__(self, k):
        if k == 2:
            return mul(self, self)
        raise TapeError("only square powers are supported")

    def __getitem__(self, idx):
        return getitem(self, idx)


# -- helpers -------------------------------------------------------------------

def is_node(x) -> bool:
    return isinstance(x, Node)


def value(x):
    """Strip the tape: plain array for nodes, identity otherwise."""
    return x.value if isinstance(x, Node) else x


detach = value


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    return None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _mk(tape: Tape, val, parents, vjp, name: str) -> Node:
    return Node(tape, val, tuple(parents), vjp, name)


def _parents(*xs):
    return [x if isinstance(x, Node) else None for x in xs]


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# -- arithmetic ----------------------------------------------------------------

def add(a, b):
    tape = _tape_of(a, b)
    va, vb = value(a), value(b)
    if tape is None:
        return va + vb
    return _mk(tape, va + vb, _parents(a, b), lambda g: (g, g), "add")


def neg(a):
    if not isinstance(a, Node):
        return -a
    return _mk(a.tape, -a.value, [a], lambda g: (-g,), "neg")


def mul(a, b):
    tape = _tape_of(a, b)
    va, vb = value(a), value(b)
    if tape is None:
        return va * vb
    return _mk(tape, va * vb, _parents(a, b),
               lambda g: (g * np.conj(vb), g * np.conj(va)), "mul")


def div(a, b):
    tape = _tape_of(a, b)
    va, vb = value(a), value(b)
    if tape is None:
        return va / vb
    out = va / vb
    return _mk(tape, out, _parents(a, b),
               lambda g: (g / np.conj(vb), -g * np.conj(out / vb)), "div")


def matmul(a, b):
    tape = _tape_of(a, b)
    va, vb = value(a), value(b)
    if tape is None:
        return va @ vb

    def vjp(g):
        ga = g @ np.conj(_swap(vb)) if isinstance(a, Node) else None
        gb = np.conj(_swap(va)) @ g if isinstance(b, Node) else None
        return ga, gb

    return _mk(tape, va @ vb, _parents(a, b), vjp, "matmul")


def conj(a):
    if not isinstance(a, Node):
        return np.conj(a)
    return _mk(a.tape, np.conj(a.value), [a], lambda g: (np.conj(g),), "conj")


def real(a):
    if not isinstance(a, Node):
        return np.real(a)
    return _mk(a.tape, np.real(a.value), [a], lambda g: (np.real(g).astype(complex),), "real")


def imag(a):
    if not isinstance(a, Node):
        return np.imag(a)
    return _mk(a.tape, np.imag(a.value), [a], lambda g: (1j * np.real(g),), "imag")


def dag(a):
    """Conjugate transpose over the last two axes."""
    if not isinstance(a, Node):
        return np.conj(_swap(a))
    return _mk(a.tape, np.conj(_swap(a.value)), [a], lambda g: (np.conj(_swap(g)),), "dag")


def swap_last(a):
    if not isinstance(a, Node):
        return _swap(a)
    return _mk(a.tape, _swap(a.value), [a], lambda g: (_swap(g),), "transpose")


# -- elementwise ---------------------------------------------------------------

def _unary(a, f, df, name):
    """``df(x, y)`` returns the complex derivative f'(x); adjoint is g * conj(f')."""
    if not isinstance(a, Node):
        return f(a)
    x = a.value
    y = f(x)
    return _mk(a.tape, y, [a], lambda g: (g * np.conj(df(x, y)),), name)


def exp(a):
    return _unary(a, np.exp, lambda x, y: y, "exp")


def log(a):
    return _unary(a, np.log, lambda x, y: 1.0 / x, "log")


def sin(a):
    return _unary(a, np.sin, lambda x, y: np.cos(x), "sin")


def cos(a):
    return _unary(a, np.cos, lambda x, y: -np.sin(x), "cos")


def sqrt(a):
    return _unary(a, np.sqrt, lambda x, y: 0.5 / y, "sqrt")


def tanh(a):
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y, "tanh")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    return _unary(a, _sigmoid, lambda x, y: y * (1.0 - y), "sigmoid")


def relu(a):
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(float), "relu")


def _cos_sqrt(s):
    return np.cos(0.5 * np.sqrt(np.maximum(s, 0.0)))


def _sinc_sqrt(s):
    # sin(sqrt(s)/2) / sqrt(s), series below s = 1e-4
    s = np.asarray(s, dtype=float)
    u = np.sqrt(np.maximum(s, 0.0))
    small = s < 1e-4
    safe = np.where(small, 1.0, u)
    series = 0.5 - s / 48.0 + s * s / 3840.0
    return np.where(small, series, np.sin(0.5 * safe) / safe)


def _sinc_sqrt_prime(s):
    s = np.asarray(s, dtype=float)
    u = np.sqrt(np.maximum(s, 0.0))
    small = s < 1e-3
    safe = np.where(small, 1.0, u)
    full = (safe * np.cos(0.5 * safe) - 2.0 * np.sin(0.5 * safe)) / (4.0 * safe ** 3)
    series = -1.0 / 48.0 + s / 1920.0 - s * s / 215040.0
    return np.where(small, series, full)


def cos_sqrt(a):
    """cos(sqrt(s)/2) for s >= 0; smooth in s."""
    return _unary(a, _cos_sqrt, lambda x, y: -0.25 * _sinc_sqrt(x), "cos_sqrt")


def sinc_sqrt(a):
    """sin(sqrt(s)/2)/sqrt(s) for s >= 0; smooth in s."""
    return _unary(a, _sinc_sqrt, lambda x, y: _sinc_sqrt_prime(x), "sinc_sqrt")


# -- reductions and shape ------------------------------------------------------

def sum_(a, axis=None):
    if not isinstance(a, Node):
        return np.sum(a, axis=axis)
    shape = a.value.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return _mk(a.tape, np.sum(a.value, axis=axis), [a], vjp, "sum")


def mean(a, axis=None):
    n = value(a).size if axis is None else value(a).shape[axis]
    return sum_(a, axis) * (1.0 / n)


def reshape(a, shape):
    if not isinstance(a, Node):
        return np.reshape(a, shape)
    old = a.value.shape
    return _mk(a.tape, a.value.reshape(shape), [a], lambda g: (np.reshape(g, old),), "reshape")


def getitem(a, idx):
    if not isinstance(a, Node):
        return a[idx]
    shape, dtype = a.value.shape, a.value.dtype

    def vjp(g):
        out = np.zeros(shape, dtype=np.result_type(dtype, g.dtype))
        np.add.at(out, idx, g)
        return (out,)

    return _mk(a.tape, a.value[idx], [a], vjp, "getitem")


def stack(xs: Sequence, axis: int = 0):
    tape = _tape_of(*xs)
    vals = [value(x) for x in xs]
    if tape is None:
        return np.stack(vals, axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _mk(tape, np.stack(vals, axis=axis), _parents(*xs), vjp, "stack")


def concatenate(xs: Sequence, axis: int = 0):
    tape = _tape_of(*xs)
    vals = [value(x) for x in xs]
    if tape is None:
        return np.concatenate(vals, axis=axis)
    cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _mk(tape, np.concatenate(vals, axis=axis), _parents(*xs), vjp, "concatenate")


def cumsum(a, axis: int = -1):
    if not isinstance(a, Node):
        return np.cumsum(a, axis=axis)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _mk(a.tape, np.cumsum(a.value, axis=axis), [a], vjp, "cumsum")


def trace(a):
    """Trace over the last two axes."""
    if not isinstance(a, Node):
        return np.trace(a, axis1=-2, axis2=-1)
    n = a.value.shape[-1]
    eye = np.eye(n)

    def vjp(g):
        return (np.asarray(g)[..., None, None] * eye,)

    return _mk(a.tape, np.trace(a.value, axis1=-2, axis2=-1), [a], vjp, "trace")


def tensordot_last(a, mats: np.ndarray):
    """``sum_k a[..., k] * mats[k]`` for a constant stack ``mats`` of shape (K, ...)."""
    va = value(a)
    flat = mats.reshape(mats.shape[0], -1)
    out = (va @ flat).reshape(va.shape[:-1] + mats.shape[1:])
    if not isinstance(a, Node):
        return out
    tail = mats.ndim - 1

    def vjp(g):
        gf = g.reshape(g.shape[: g.ndim - tail] + (-1,))
        return (gf @ np.conj(flat).T,)

    return _mk(a.tape, out, [a], vjp, "tensordot")


# -- spectral functions of Hermitian matrices ---------------------------------

def herm_func(h, f: Callable, divided: Callable, name: str = "herm_func"):
    """``V f(Λ) V†`` for Hermitian ``h`` (batched over leading axes).

    ``divided(li, lj)`` must return the divided difference
    ``(f(li) - f(lj)) / (li - lj)`` including its diagonal limit ``f'(l)``.
    The adjoint is the Daleckii-Krein (Loewner) formula, which stays finite at
    degenerate eigenvalues.
    """
    vh = value(h)
    lam, vecs = np.linalg.eigh(vh)
    fl = f(lam)
    out = (vecs * fl[..., None, :]) @ np.conj(_swap(vecs))
    if not isinstance(h, Node):
        return out
    loewner = divided(lam[..., :, None], lam[..., None, :])

    def vjp(g):
        inner = np.conj(_swap(vecs)) @ g @ vecs
        gh = vecs @ (np.conj(loewner) * inner) @ np.conj(_swap(vecs))
        return (0.5 * (gh + np.conj(_swap(gh))),)

    return _mk(h.tape, out, [h], vjp, name)


def _expmi_divided(li, lj):
    # (e^{-i li} - e^{-i lj}) / (li - lj), stable through li == lj
    d = li - lj
    half = 0.5 * d
    small = np.abs(half) < 1e-8
    safe = np.where(small, 1.0, half)
    sinc = np.where(small, 1.0 - half * half / 6.0, np.sin(safe) / safe)
    return -1j * np.exp(-0.5j * (li + lj)) * sinc


def expm_herm(h):
    """``exp(-i h)`` for Hermitian ``h``."""
    return herm_func(h, lambda lam: np.exp(-1j * lam), _expmi_divided, "expm_herm")


def _sqrt_divided(li, lj, floor=1e-14):
    si = np.sqrt(np.maximum(li, floor))
    sj = np.sqrt(np.maximum(lj, floor))
    return 1.0 / (si + sj)


def sqrtm_psd(h):
    """Principal square root of a positive semidefinite Hermitian matrix."""
    return herm_func(h, lambda lam: np.sqrt(np.maximum(lam, 0.0)), _sqrt_divided, "sqrtm")


def scatter(vals, index: tuple, shape: tuple):
    """Place ``vals[..., k]`` at ``index`` (a tuple of integer arrays of length K)
    inside a zero array whose trailing dims are ``shape``. Positions must be unique."""
    v = value(vals)
    out = np.zeros(v.shape[:-1] + tuple(shape), dtype=np.result_type(v.dtype, complex))
    full = (Ellipsis,) + tuple(index)
    out[full] = v
    if not isinstance(vals, Node):
        return out
    return _mk(vals.tape, out, [vals], lambda g: (g[full],), "scatter")


def where(mask, a, b):
    """Elementwise select with a constant boolean mask."""
    tape = _tape_of(a, b)
    va, vb = value(a), value(b)
    if tape is None:
        return np.where(mask, va, vb)
    zero = np.zeros((), dtype=np.result_type(np.asarray(va).dtype, np.asarray(vb).dtype))
    return _mk(tape, np.where(mask, va, vb), _parents(a, b),
               lambda g: (np.where(mask, g, zero), np.where(mask, zero, g)), "where")
