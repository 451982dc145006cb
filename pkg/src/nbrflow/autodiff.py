"""Minimal reverse-mode differentiation over numpy float64 arrays.

Operations are recorded onto the innermost active :class:`Graph`.  Outside any
graph, or when no input is tracked, ops just compute values, which is how the
flows run for sampling and evaluation.

    with Graph() as g:
        loss = (w * x).sum()
    grads = backward(g, loss)
    grads.of(w)
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DomainError, GraphNotFinalized, NonFiniteError, NonScalarOutput, ShapeMismatch

DTYPE = np.float64

_local = threading.local()


def _graph_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_graph() -> Optional["Graph"]:
    stack = _graph_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "_graph", "_node", "_from_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor values must be finite")
        self.data = arr
        self.requires_grad = requires_grad
        self._graph = None
        self._node = None
        self._from_op = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor({self.data!r}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    kind: str
    inputs: tuple
    tensor: Tensor
    backward_fn: Optional[Callable]


class Graph:
    """Tape of operation records in creation (topological) order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.finalized = False

    def __enter__(self):
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _graph_stack()
        stack.remove(self)
        self.finalize()
        return False

    def finalize(self):
        self.finalized = True

    def node_id(self, t: Tensor) -> Optional[int]:
        return t._node if t._graph is self else None

    def _leaf(self, t: Tensor) -> int:
        if t._graph is not self:
            # a leaf can be reused by successive graphs; it belongs to the latest
            t._graph = self
            t._node = len(self.nodes)
            self.nodes.append(Node("leaf", (), t, None))
        return t._node

    def _tracks(self, t: Tensor) -> bool:
        # op outputs of other graphs are constants here; leaves join any graph
        return t.requires_grad and (t._graph is self or not t._from_op)


class Gradients(dict):
    """Map of node id to gradient array, with lookup by tensor."""

    def __init__(self, graph: Graph):
        super().__init__()
        self.graph = graph
        # leaves may be re-registered by later graphs, so remember them by identity
        self._leaves = {id(n.tensor): i for i, n in enumerate(graph.nodes) if n.kind == "leaf"}

    def of(self, t: Tensor) -> np.ndarray:
        nid = self._leaves.get(id(t), self.graph.node_id(t))
        if nid is None or nid not in self:
            return np.zeros_like(t.data)
        return self[nid]


def _record(kind: str, value: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{kind} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = value
    out.requires_grad = False
    out._graph = None
    out._node = None
    out._from_op = True
    g = active_graph()
    if g is None or g.finalized:
        return out
    ids = []
    any_tracked = False
    for t in inputs:
        if g._tracks(t):
            if t._graph is not g:
                g._leaf(t)
            ids.append(t._node)
            any_tracked = True
        else:
            ids.append(None)
    if not any_tracked:
        return out
    out.requires_grad = True
    out._graph = g
    out._node = len(g.nodes)
    g.nodes.append(Node(kind, tuple(ids), out, backward_fn))
    return out


def _check_broadcast(a: np.ndarray, b: np.ndarray, kind: str):
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 and a.ndim <= len(sb) or b.size == 1 and b.ndim <= len(sa):
        return
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(small) == 0 or big[len(big) - len(small):] == small:
        return
    raise ShapeMismatch(f"{kind}: cannot broadcast {sa} with {sb}")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    nlead = grad.ndim - len(shape)
    if nlead > 0:
        grad = grad.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# elementwise binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("division by zero")
    out = ad / bd
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# elementwise unary ops

def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.any(x <= 0):
        raise DomainError("log of non-positive value")
    return _record("log", np.log(x), (a,), lambda g: (g / x,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _record("softplus", np.logaddexp(0.0, x), (a,), lambda g: (g * _sigmoid(x),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _record("relu", np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),))


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _record("square", x * x, (a,), lambda g: (2.0 * g * x,))


# reductions and structural ops

def tsum(a, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record("sum", np.sum(a.data, axis=axis), (a,), back)


def mean(a, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    n = a.size if axis is None else shape[axis]

    def back(g):
        if axis is None:
            return (np.full(shape, g / n),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _record("mean", np.mean(a.data, axis=axis), (a,), back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeMismatch("concat of nothing")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(ts)))

    return _record("concat", out, ts, back)


def take(a, index, axis: int = 0) -> Tensor:
    """Select entries along ``axis`` (the "slice" op)."""
    a = as_tensor(a)
    shape = a.shape
    if isinstance(index, slice):
        index = np.arange(shape[axis])[index]
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != 1 or (index.size and (index.min() < -shape[axis] or index.max() >= shape[axis])):
        raise ShapeMismatch(f"slice: bad index for axis of size {shape[axis]}")

    def back(g):
        full = np.zeros(shape, dtype=DTYPE)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (full,)

    return _record("slice", np.take(a.data, index, axis=axis), (a,), back)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    _check_broadcast(a.data, np.empty(shape), "broadcast")
    src = a.shape
    return _record("broadcast", np.broadcast_to(a.data, shape).copy(), (a,),
                   lambda g: (_unbroadcast(g, src),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(src),))


_OPS = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "matmul": matmul,
    "exp": exp, "log": log, "tanh": tanh, "sigmoid": sigmoid, "softplus": softplus,
    "square": square, "relu": relu, "sum": tsum, "mean": mean, "concat": lambda *ts, axis=0: concat(ts, axis),
    "slice": take, "broadcast": broadcast_to, "reshape": reshape,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        op = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return op(*inputs, **kwargs)


def backward(graph: Graph, output: Tensor) -> Gradients:
    """Accumulate d(output)/d(node) for every node of ``graph``.

    The result holds an entry for every leaf registered in the graph, zero when
    the output does not depend on it.
    """
    if not graph.finalized:
        raise GraphNotFinalized("exit the Graph context (or call finalize) before backward")
    if output.size != 1:
        raise NonScalarOutput(f"backward needs a scalar output, got shape {output.shape}")
    grads = Gradients(graph)
    for i, node in enumerate(graph.nodes):
        if node.kind == "leaf":
            grads[i] = np.zeros_like(node.tensor.data)
    start = graph.node_id(output)
    if start is None:
        return grads
    acc = {start: np.ones_like(output.data)}
    for i in range(start, -1, -1):
        g = acc.pop(i, None)
        if g is None:
            continue
        node = graph.nodes[i]
        if node.kind == "leaf":
            grads[i] = grads[i] + g
            continue
        for nid, gi in zip(node.inputs, node.backward_fn(g)):
            if nid is None:
                continue
            acc[nid] = acc[nid] + gi if nid in acc else gi
    return grads


def grad_check(fn: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max relative disagreement between reverse-mode and central differences."""
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.array(point, dtype=DTYPE)
    leaf = Tensor(x0, requires_grad=True)
    with Graph() as g:
        out = fn(leaf)
    analytic = backward(g, out).of(leaf)
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for j in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[j] += h
        xm[j] -= h
        fp = fn(Tensor(xp.reshape(x0.shape))).item()
        fm = fn(Tensor(xm.reshape(x0.shape))).item()
        flat[j] = (fp - fm) / (2.0 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


def grad_check_params(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                      max_coords: Optional[int] = None, rng=None) -> float:
    """Like :func:`grad_check` but perturbs parameter tensors in place of an input.

    ``loss_fn`` rebuilds the loss from the current parameter values.  When
    ``max_coords`` is given, a random subset of coordinates is checked.
    """
    with Graph() as g:
        out = loss_fn()
    grads = backward(g, out)
    coords = [(pi, j) for pi, p in enumerate(params) for j in range(p.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    worst = 0.0
    for pi, j in coords:
        p = params[pi]
        analytic = grads.of(p).reshape(-1)[j]
        orig = p.data
        vals = []
        for sign in (1.0, -1.0):
            pert = orig.copy().reshape(-1)
            pert[j] += sign * h
            p.data = pert.reshape(orig.shape)
            vals.append(loss_fn().item())
        p.data = orig
        numeric = (vals[0] - vals[1]) / (2.0 * h)
        worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
    return worst
