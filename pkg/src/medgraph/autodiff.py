"""Small define-by-run reverse-mode autodiff over numpy arrays (rank 0-2).

Every operation returns a :class:`Node`; calling :func:`backward` on a scalar
node walks the graph in reverse topological order and accumulates gradients
into ``node.grad``. Broadcasting follows numpy rules restricted to rank <= 2.
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy import sparse

__all__ = [
    "Node", "ShapeError", "const", "param", "backward",
    "add", "sub", "mul", "div", "neg", "matmul", "exp", "log", "relu", "elu",
    "sigmoid", "log_sigmoid", "tanh", "softmax", "log_softmax", "sqrt",
    "square", "expm1_ratio", "sum", "mean", "concat", "take", "reshape",
    "columns", "clip", "transpose",
    "grad_check", "GradCheckReport",
]

# Active kink recorder used by grad_check: (threshold, hit list) or None.
_KINKS: contextvars.ContextVar = contextvars.ContextVar("_KINKS", default=None)


class ShapeError(ValueError):
    pass


class Node:
    __slots__ = ("value", "grad", "parents", "name")

    def __init__(self, value, parents=(), name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        if self.value.ndim > 2:
            raise ShapeError(f"rank {self.value.ndim} arrays are not supported")
        self.grad: np.ndarray | None = None
        # (parent, vjp) pairs; vjp maps the upstream gradient to the parent's.
        self.parents: tuple = tuple(parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.shape})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)
    __rmatmul__ = lambda self, other: matmul(other, self)

    @property
    def T(self):
        return transpose(self)


def const(value) -> Node:
    return value if isinstance(value, Node) else Node(value)


def param(value, name: str | None = None) -> Node:
    return Node(np.array(value, dtype=np.float64), name=name)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Node, b: Node, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _record_kink(x: np.ndarray, at: float = 0.0):
    rec = _KINKS.get()
    if rec is not None:
        threshold, hits = rec
        if np.any(np.abs(x - at) <= threshold):
            hits.append(True)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Node:
    a, b = const(a), const(b)
    _broadcast_shape(a, b, "add")
    return Node(a.value + b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a, b) -> Node:
    a, b = const(a), const(b)
    _broadcast_shape(a, b, "sub")
    return Node(a.value - b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: -_unbroadcast(g, b.shape)),
    ])


def mul(a, b) -> Node:
    a, b = const(a), const(b)
    _broadcast_shape(a, b, "mul")
    return Node(a.value * b.value, [
        (a, lambda g: _unbroadcast(g * b.value, a.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.shape)),
    ])


def div(a, b) -> Node:
    a, b = const(a), const(b)
    _broadcast_shape(a, b, "div")
    out = a.value / b.value
    return Node(out, [
        (a, lambda g: _unbroadcast(g / b.value, a.shape)),
        (b, lambda g: _unbroadcast(-g * out / b.value, b.shape)),
    ])


def neg(a) -> Node:
    a = const(a)
    return Node(-a.value, [(a, lambda g: -g)])


def square(a) -> Node:
    a = const(a)
    return Node(a.value * a.value, [(a, lambda g: 2.0 * g * a.value)])


def exp(a) -> Node:
    a = const(a)
    out = np.exp(a.value)
    return Node(out, [(a, lambda g: g * out)])


def log(a) -> Node:
    a = const(a)
    return Node(np.log(a.value), [(a, lambda g: g / a.value)])


def sqrt(a) -> Node:
    """Square root whose gradient at exactly zero is taken as 0 (a kink)."""
    a = const(a)
    _record_kink(a.value)
    out = np.sqrt(a.value)
    inv = np.divide(0.5, out, out=np.zeros_like(out), where=out > 0)
    return Node(out, [(a, lambda g: g * inv)])


def relu(a) -> Node:
    a = const(a)
    _record_kink(a.value)
    mask = (a.value > 0).astype(np.float64)
    return Node(a.value * mask, [(a, lambda g: g * mask)])


def elu(a) -> Node:
    """ELU with alpha = 1."""
    a = const(a)
    _record_kink(a.value)
    neg_part = np.expm1(np.minimum(a.value, 0.0))
    out = np.where(a.value > 0, a.value, neg_part)
    slope = np.where(a.value > 0, 1.0, neg_part + 1.0)
    return Node(out, [(a, lambda g: g * slope)])


def elu_plus_one(a) -> Node:
    """ELU(a) + 1, evaluated as exp(a) below zero so tiny values stay positive."""
    a = const(a)
    out = np.where(a.value > 0, a.value + 1.0, np.exp(np.minimum(a.value, 0.0)))
    slope = np.where(a.value > 0, 1.0, out)
    return Node(out, [(a, lambda g: g * slope)])


def sigmoid(a) -> Node:
    a = const(a)
    out = _np_sigmoid(a.value)
    return Node(out, [(a, lambda g: g * out * (1.0 - out))])


def log_sigmoid(a) -> Node:
    """log(sigmoid(a)) without overflow for large |a|."""
    a = const(a)
    x = a.value
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return Node(out, [(a, lambda g: g * _np_sigmoid(-x))])


def tanh(a) -> Node:
    a = const(a)
    out = np.tanh(a.value)
    return Node(out, [(a, lambda g: g * (1.0 - out * out))])


def expm1_ratio(w, x) -> Node:
    """expm1(w * x) / w, continued by its limit x at w = 0.

    ``w`` is a scalar node, ``x`` an array of nonnegative offsets. Small
    ``|w x|`` is evaluated by Taylor series to avoid cancellation.
    """
    w, x = const(w), const(x)
    if w.value.ndim != 0:
        raise ShapeError(f"expm1_ratio: w must be scalar, got {w.shape}")
    wv, xv = float(w.value), x.value
    z = wv * xv
    small = np.abs(z) < 1e-4
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        big_val = np.expm1(z) / wv
        big_dw = (xv * np.exp(z) * wv - np.expm1(z)) / (wv * wv)
        big_dx = np.exp(z)
    small_val = xv * (1.0 + z / 2.0 + z * z / 6.0 + z ** 3 / 24.0)
    small_dw = xv * xv * (0.5 + z / 3.0 + z * z / 8.0 + z ** 3 / 30.0)
    small_dx = 1.0 + z + z * z / 2.0 + z ** 3 / 6.0
    out = np.where(small, small_val, big_val)
    dw = np.where(small, small_dw, big_dw)
    dx = np.where(small, small_dx, big_dx)
    return Node(out, [
        (w, lambda g: np.sum(g * dw)),
        (x, lambda g: _unbroadcast(g * dx, x.shape)),
    ])


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ------------------------------------------------------------ linear algebra

def matmul(a, b) -> Node:
    a, b = const(a), const(b)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.value @ b.value

    def grad_a(g):
        if b.ndim == 1:
            return np.multiply.outer(g, b.value) if a.ndim == 2 else g * b.value
        return g @ b.value.T

    def grad_b(g):
        if a.ndim == 1:
            return np.multiply.outer(a.value, g) if b.ndim == 2 else g * a.value
        if b.ndim == 1:
            return a.value.T @ g
        return a.value.T @ g

    return Node(out, [(a, grad_a), (b, grad_b)])


def transpose(a) -> Node:
    a = const(a)
    return Node(a.value.T, [(a, lambda g: g.T)])


def reshape(a, shape) -> Node:
    a = const(a)
    old = a.shape
    return Node(a.value.reshape(shape), [(a, lambda g: g.reshape(old))])


def sum(a, axis: int | None = None) -> Node:  # noqa: A001 - mirrors numpy
    a = const(a)
    out = a.value.sum(axis=axis)

    def grad(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), a.shape).copy()

    return Node(out, [(a, grad)])


def mean(a, axis: int | None = None) -> Node:
    a = const(a)
    n = a.value.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def softmax(a, axis: int = -1) -> Node:
    a = const(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return Node(out, [(a, grad)])


def log_softmax(a, axis: int = -1) -> Node:
    a = const(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return Node(out, [(a, lambda g: g - p * g.sum(axis=axis, keepdims=True))])


def concat(nodes: Iterable, axis: int = -1) -> Node:
    nodes = [const(n) for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        shapes = [n.shape for n in nodes]
        raise ShapeError(f"concat: incompatible shapes {shapes}") from None
    sizes = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def make(i):
        return lambda g: np.split(g, sizes, axis=axis)[i]

    return Node(out, [(n, make(i)) for i, n in enumerate(nodes)])


def columns(a, start: int, stop: int) -> Node:
    """Column slice ``a[:, start:stop]`` of a rank-2 node."""
    a = const(a)

    def grad(g):
        out = np.zeros(a.shape)
        out[:, start:stop] = g
        return out

    return Node(a.value[:, start:stop], [(a, grad)])


def clip(a, lo: float, hi: float) -> Node:
    a = const(a)
    inside = ((a.value >= lo) & (a.value <= hi)).astype(np.float64)
    return Node(np.clip(a.value, lo, hi), [(a, lambda g: g * inside)])


def take(a, index) -> Node:
    """Row gather ``a[index]``; the gradient scatter-adds repeated rows."""
    a = const(a)
    index = np.asarray(index, dtype=np.intp)

    def grad(g):
        if a.ndim == 1:
            return np.bincount(index, weights=g, minlength=a.shape[0])
        scatter = sparse.csr_matrix((np.ones(index.size), (index, np.arange(index.size))),
                                    shape=(a.shape[0], index.size))
        return np.asarray(scatter @ g)

    return Node(a.value[index], [(a, grad)])


# ------------------------------------------------------------------ backward

def _topo_order(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> None:
    """Populate ``.grad`` on every node reachable from the scalar ``loss``.

    Gradients accumulate; call :meth:`Node.zero_grad` (or build a fresh
    graph) before a second pass.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.value).all():
        raise FloatingPointError(f"non-finite loss {float(loss.value)}")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        for parent, vjp in node.parents:
            pg = np.asarray(vjp(g), dtype=np.float64).reshape(parent.shape)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- grad check

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    status: dict[str, str] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(s != "fail" for s in self.status.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def grad_check(f: Callable[[Mapping[str, Node]], Node],
               params: Mapping[str, np.ndarray],
               step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``f`` receives a mapping of leaf nodes and returns a scalar node. The
    error for a parameter is ``|analytic - numeric|`` over the larger of the
    two gradient norms. When a kink (relu/elu/sqrt input) lies within
    ``step`` of a probed point, a failing parameter is reported as
    ``"non-differentiable point"`` instead of ``"fail"``.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: param(v, name=k) for k, v in base.items()}
    hits: list = []
    token = _KINKS.set((step, hits))
    try:
        loss = f(leaves)
        backward(loss)

        def evaluate(name, flat_idx, delta):
            probe = dict(base)
            arr = base[name].copy()
            arr.reshape(-1)[flat_idx] += delta
            probe[name] = arr
            return float(f({k: Node(v) for k, v in probe.items()}).value)

        report = GradCheckReport(tol=tol)
        for name, value in base.items():
            hits.clear()
            analytic = leaves[name].grad
            analytic = np.zeros_like(value) if analytic is None else analytic
            numeric = np.zeros(value.size)
            for i in range(value.size):
                numeric[i] = (evaluate(name, i, step) - evaluate(name, i, -step)) / (2 * step)
            numeric = numeric.reshape(value.shape)
            diff = float(np.linalg.norm(analytic - numeric))
            scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
            # both gradients vanish: fall back to the absolute difference
            err = diff / scale if scale > 1e-8 else diff
            report.max_rel_error[name] = err
            if err <= tol:
                report.status[name] = "ok"
            elif hits:
                report.status[name] = "non-differentiable point"
            else:
                report.status[name] = "fail"
    finally:
        _KINKS.reset(token)
    return report
