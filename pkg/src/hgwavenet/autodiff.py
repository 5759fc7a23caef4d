"""Tape-based reverse-mode differentiation over numpy arrays.

Every differentiable operation is a named *primitive* with a forward function
and a vector-Jacobian product (its adjoint rule).  Operations performed on
:class:`Tensor` objects while a :class:`GradientTape` is active are recorded
in order; :meth:`GradientTape.gradient` walks the record backwards.

Outside of a tape, the same functions run as plain numpy computations, which
is how the public geometry API serves both training and evaluation.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels


class UnregisteredPrimitiveError(KeyError):
    pass


@dataclass
class Primitive:
    name: str
    forward: Callable
    vjp: Callable | None
    # forward returns (value, saved); saved is handed to vjp as ``aux=``
    has_aux: bool = False


PRIMITIVES: dict[str, Primitive] = {}


def defprim(name: str, forward: Callable, vjp: Callable | None = None, has_aux: bool = False) -> Primitive:
    prim = Primitive(name, forward, vjp, has_aux)
    PRIMITIVES[name] = prim
    return prim


def get_primitive(name: str) -> Primitive:
    try:
        return PRIMITIVES[name]
    except KeyError:
        raise UnregisteredPrimitiveError(f"no primitive registered under {name!r}") from None


@contextlib.contextmanager
def override_adjoint(name: str, vjp: Callable):
    """Temporarily swap the adjoint rule of ``name`` (used for negative controls)."""
    prim = get_primitive(name)
    saved = prim.vjp
    prim.vjp = vjp
    try:
        yield
    finally:
        prim.vjp = saved


class Tensor:
    __slots__ = ("value", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.value.shape}{tag}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __matmul__ = lambda a, b: matmul(a, b)
    __rmatmul__ = lambda a, b: matmul(b, a)
    __neg__ = lambda a: neg(a)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)


@dataclass
class _Node:
    prim: Primitive
    inputs: tuple
    kwargs: dict
    output: Tensor
    aux: object = None


@dataclass
class GradientTape:
    """Records primitive applications while active (``with GradientTape() as tape``)."""

    nodes: list = field(default_factory=list)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def record(self, prim, inputs, kwargs, output, aux=None):
        self.nodes.append(_Node(prim, inputs, kwargs, output, aux))

    def gradient(self, loss: Tensor, params) -> list[np.ndarray]:
        """Adjoints of the scalar ``loss`` with respect to each entry of ``params``.

        Parameters that the loss does not depend on get zero arrays.
        """
        adj = self._backprop(loss)
        return [adj.get(id(p), np.zeros_like(p.value)) for p in params]

    def _backprop(self, loss: Tensor) -> dict[int, np.ndarray]:
        if not isinstance(loss, Tensor):
            return {}
        adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = adj.pop(id(node.output), None)
            if g is None:
                continue
            if node.prim.vjp is None:
                raise UnregisteredPrimitiveError(
                    f"primitive {node.prim.name!r} has no registered adjoint rule"
                )
            vals = [x.value if isinstance(x, Tensor) else x for x in node.inputs]
            if node.prim.has_aux:
                grads = node.prim.vjp(g, node.output.value, *vals, aux=node.aux, **node.kwargs)
            else:
                grads = node.prim.vjp(g, node.output.value, *vals, **node.kwargs)
            for x, gx in zip(node.inputs, grads):
                if gx is None or not isinstance(x, Tensor) or not x.requires_grad:
                    continue
                key = id(x)
                if key in adj:
                    adj[key] = adj[key] + gx
                else:
                    adj[key] = gx
            # keep leaf adjoints (parameters) around; they are never node outputs
        return adj

    def replay(self) -> bool:
        """Recompute every recorded node from its saved inputs; True when bit-identical."""
        for node in self.nodes:
            vals = [x.value if isinstance(x, Tensor) else x for x in node.inputs]
            again = node.prim.forward(*vals, **node.kwargs)
            if node.prim.has_aux:
                again = again[0]
            if not np.array_equal(np.asarray(again), node.output.value, equal_nan=True):
                return False
        return True


_TAPES: list[GradientTape] = []


@contextlib.contextmanager
def no_grad():
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def _apply(name: str, *inputs, **kwargs):
    prim = get_primitive(name)
    vals = [x.value if isinstance(x, Tensor) else x for x in inputs]
    out = prim.forward(*vals, **kwargs)
    aux = None
    if prim.has_aux:
        out, aux = out
    tracked = _TAPES and any(isinstance(x, Tensor) and x.requires_grad for x in inputs)
    if tracked:
        res = Tensor(out, requires_grad=True)
        _TAPES[-1].record(prim, inputs, kwargs, res, aux)
        return res
    if any(isinstance(x, Tensor) for x in inputs):
        return Tensor(out)
    return out


def value(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _shape(x):
    return np.shape(x)


# ----------------------------------------------------------------- elementwise

defprim("add", lambda a, b: np.add(a, b),
        lambda g, o, a, b: (_unbroadcast(g, _shape(a)), _unbroadcast(g, _shape(b))))
defprim("sub", lambda a, b: np.subtract(a, b),
        lambda g, o, a, b: (_unbroadcast(g, _shape(a)), _unbroadcast(-g, _shape(b))))
defprim("mul", lambda a, b: np.multiply(a, b),
        lambda g, o, a, b: (_unbroadcast(g * b, _shape(a)), _unbroadcast(g * a, _shape(b))))
defprim("div", lambda a, b: np.divide(a, b),
        lambda g, o, a, b: (_unbroadcast(g / b, _shape(a)), _unbroadcast(-g * o / b, _shape(b))))
defprim("neg", lambda a: np.negative(a), lambda g, o, a: (-g,))
defprim("power", lambda a, p: np.power(a, p),
        lambda g, o, a, p: (g * p * np.power(a, p - 1),))
defprim("exp", np.exp, lambda g, o, a: (g * o,))
defprim("log", np.log, lambda g, o, a: (g / a,))
defprim("sqrt", np.sqrt, lambda g, o, a: (g * 0.5 / o,))
defprim("tanh", np.tanh, lambda g, o, a: (g * (1.0 - o * o),))
defprim("atanh", np.arctanh, lambda g, o, a: (g / (1.0 - a * a),))


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


defprim("sigmoid", _sigmoid, lambda g, o, a: (g * o * (1.0 - o),))
defprim("softplus", lambda a: np.logaddexp(0.0, a), lambda g, o, a: (g * _sigmoid(a),))
defprim("leaky_relu", lambda a, slope=0.2: np.where(a > 0, a, slope * a),
        lambda g, o, a, slope=0.2: (np.where(a > 0, g, slope * g),))
defprim("clip", lambda a, lo=None, hi=None: np.clip(a, lo, hi),
        lambda g, o, a, lo=None, hi=None: (
            g * ((a >= (-np.inf if lo is None else lo)) & (a <= (np.inf if hi is None else hi))),))


# ----------------------------------------------------------------- reductions and shapes

def _sum_vjp(g, o, a, axis=None, keepdims=False):
    shape = np.shape(a)
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


defprim("sum", lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims), _sum_vjp)


def _matmul_vjp(g, o, a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    if b.ndim == 1:
        return np.multiply.outer(g, b), np.tensordot(g, a, axes=(list(range(g.ndim)), list(range(g.ndim))))
    if a.ndim == 1:
        return b @ g, np.outer(a, g)
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


defprim("matmul", lambda a, b: np.matmul(a, b), _matmul_vjp)


def _norm_fwd(a, eps=1e-15):
    return np.maximum(np.sqrt(np.sum(a * a, axis=-1, keepdims=True)), eps)


def _norm_vjp(g, o, a, eps=1e-15):
    raw = np.sqrt(np.sum(a * a, axis=-1, keepdims=True))
    active = raw > eps
    return (np.where(active, g * a / np.where(active, o, 1.0), 0.0),)


# row norm over the last axis, floored so that the zero vector has a finite gradient
defprim("norm", _norm_fwd, _norm_vjp)


def _take_vjp(g, o, a, index):
    out = np.zeros(np.shape(a))
    np.add.at(out, index, g)
    return (out,)


defprim("take", lambda a, index: np.asarray(a)[index], _take_vjp)
defprim("reshape", lambda a, shape: np.reshape(a, shape),
        lambda g, o, a, shape: (np.reshape(g, np.shape(a)),))


def _concat_vjp(g, o, *xs, axis=0):
    sizes = np.cumsum([np.shape(x)[axis] for x in xs])[:-1]
    return tuple(np.split(g, sizes, axis=axis))


defprim("concat", lambda *xs, axis=0: np.concatenate(xs, axis=axis), _concat_vjp)


def _stack_vjp(g, o, *xs, axis=0):
    return tuple(np.moveaxis(g, axis, 0))


defprim("stack", lambda *xs, axis=0: np.stack(xs, axis=axis), _stack_vjp)


def _softmax_fwd(a, axis=-1):
    z = a - np.max(a, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _softmax_vjp(g, o, a, axis=-1):
    return (o * (g - np.sum(g * o, axis=axis, keepdims=True)),)


defprim("softmax", _softmax_fwd, _softmax_vjp)


# ----------------------------------------------------------------- geometry helpers

def _project_radius(c):
    return (1.0 - 1e-5) / np.sqrt(c)


def _project_fwd(x, c):
    n = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    r = _project_radius(c)
    scale = np.where(n > r, r / np.maximum(n, 1e-300), 1.0)
    return x * scale


def _project_vjp(g, o, x, c):
    n = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    r = _project_radius(c)
    active = n > r
    safe_n = np.maximum(n, 1e-300)
    xhat = x / safe_n
    gx_active = (r / safe_n) * (g - np.sum(g * xhat, axis=-1, keepdims=True) * xhat)
    gx = np.where(active, gx_active, g)
    # d r / d c = -r / (2c)
    gr = np.where(active, np.sum(g * xhat, axis=-1, keepdims=True), 0.0)
    gc = np.sum(gr * (-r / (2.0 * c)))
    return gx, _unbroadcast(np.asarray(gc), np.shape(c))


defprim("ball_project", _project_fwd, _project_vjp)


# ----------------------------------------------------------------- fused attention aggregation

def _attn_fwd(s, t, u, indptr, indices, logw, slope=0.2):
    out, w, pre = kernels.attention_forward(s, t, u, indptr, indices, logw, slope)
    return out, (w, pre)


def _attn_vjp(g, o, s, t, u, indptr, indices, logw, aux=None, slope=0.2):
    w, pre = aux
    gs, gt, gu = kernels.attention_backward(np.ascontiguousarray(g), u, indptr, indices, w, pre, slope)
    return gs, gt, gu, None, None, None


defprim("attention_aggregate", _attn_fwd, _attn_vjp, has_aux=True)


# ----------------------------------------------------------------- public op functions

def add(a, b): return _apply("add", a, b)
def sub(a, b): return _apply("sub", a, b)
def mul(a, b): return _apply("mul", a, b)
def div(a, b): return _apply("div", a, b)
def neg(a): return _apply("neg", a)
def power(a, p): return _apply("power", a, p=p)
def exp(a): return _apply("exp", a)
def log(a): return _apply("log", a)
def sqrt(a): return _apply("sqrt", a)
def tanh(a): return _apply("tanh", a)
def atanh(a): return _apply("atanh", a)
def sigmoid(a): return _apply("sigmoid", a)
def softplus(a): return _apply("softplus", a)
def leaky_relu(a, slope=0.2): return _apply("leaky_relu", a, slope=slope)
def clip(a, lo=None, hi=None): return _apply("clip", a, lo=lo, hi=hi)
def sum_(a, axis=None, keepdims=False): return _apply("sum", a, axis=axis, keepdims=keepdims)
def matmul(a, b): return _apply("matmul", a, b)
def norm(a, eps=1e-15): return _apply("norm", a, eps=eps)
def take(a, index): return _apply("take", a, index=index)
def reshape(a, shape): return _apply("reshape", a, shape=shape)
def concat(xs, axis=0): return _apply("concat", *xs, axis=axis)
def stack(xs, axis=0): return _apply("stack", *xs, axis=axis)
def softmax(a, axis=-1): return _apply("softmax", a, axis=axis)
def ball_project(x, c): return _apply("ball_project", x, c)


def mean(a, axis=None):
    n = np.size(value(a)) if axis is None else np.shape(value(a))[axis]
    return div(sum_(a, axis=axis), float(n))


def attention_aggregate(s, t, u, indptr, indices, logw, slope=0.2):
    """Per-row softmax attention over CSR neighbors, weighted sum of neighbor rows of ``u``.

    Edge logit for (i, j) is ``leaky_relu(s[i] + t[j]) + logw[ij]``; rows without
    any neighbor return their own row of ``u``.
    """
    return _apply("attention_aggregate", s, t, u, indptr, indices, logw, slope=slope)
