"""Tape-based reverse-mode differentiation over dense 2-D float64 arrays.

Operations are recorded only while a :class:`Graph` is active::

    with Graph() as g:
        loss = sum_all(mul(x, x))
    g.backward(loss)

Outside a graph every op is a plain numpy evaluation, which is what the
evaluation code paths rely on.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operands do not conform to a primitive."""


class GraphError(RuntimeError):
    """Contract violation when differentiating."""


class NumericError(ArithmeticError):
    """A loss evaluated to a non-finite value."""


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "node_id", "_graph")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"Tensor must be 2-D, got shape {arr.shape}")
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self._graph: Graph | None = None

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def item(self) -> float:
        if self.values.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def copy(self) -> "Tensor":
        return Tensor(self.values.copy(), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_active: list["Graph"] = []


class Graph:
    """Ordered record of the operations of one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Graph":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def record(self, op: str, inputs: tuple[Tensor, ...], out: Tensor, backward) -> None:
        for t in inputs:
            if t.requires_grad and t.node_id is None:
                self._leaves[id(t)] = t
        out.requires_grad = True
        out.node_id = len(self.nodes)
        out._graph = self
        self.nodes.append(_Node(op, inputs, out, backward))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape."""
        if loss.shape != (1, 1):
            raise GraphError(f"loss must be a 1x1 tensor, got {loss.shape}")
        if loss._graph is not self or loss.node_id is None:
            raise GraphError("loss was not produced by this graph")
        pending: dict[int, np.ndarray] = {loss.node_id: np.ones((1, 1))}
        for node in reversed(self.nodes[: loss.node_id + 1]):
            g_out = pending.pop(node.output.node_id, None)
            if g_out is None:
                continue
            for inp, g in zip(node.inputs, node.backward(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                if inp.node_id is not None and inp._graph is self:
                    if inp.node_id in pending:
                        pending[inp.node_id] = pending[inp.node_id] + g
                    else:
                        pending[inp.node_id] = g
                elif inp.grad is None:
                    inp.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    inp.grad += g
        for leaf in self._leaves.values():
            if leaf.grad is None:
                leaf.zero_grad()


def _graph_for(inputs: Iterable[Tensor]) -> Graph | None:
    if not _active:
        return None
    if any(t.requires_grad for t in inputs):
        return _active[-1]
    return None


def _emit(op: str, inputs: tuple[Tensor, ...], values: np.ndarray, backward) -> Tensor:
    out = Tensor(values)
    graph = _graph_for(inputs)
    if graph is not None:
        graph.record(op, inputs, out, backward)
    return out


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, int]:
    shape = []
    for da, db in zip(a.shape, b.shape):
        if da == db or db == 1:
            shape.append(da)
        elif da == 1:
            shape.append(db)
        else:
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")
    return tuple(shape)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


# --- primitives -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    av, bv = a.values, b.values

    def back(g):
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)

    return _emit("matmul", (a, b), av @ bv, back)


def transpose(a: Tensor) -> Tensor:
    return _emit("transpose", (a,), a.values.T.copy(), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.values + b.values,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.values - b.values,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    av, bv = a.values, b.values

    def back(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _emit("mul", (a, b), av * bv, back)


def scale(a: Tensor, s: float) -> Tensor:
    return _emit("scale", (a,), a.values * s, lambda g: (g * s,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.values)
    return _emit("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _emit("relu", (a,), np.where(mask, a.values, 0.0), lambda g: (g * mask,))


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax."""
    if a.cols == 0:
        raise ShapeError(f"log_softmax: shape {a.shape} has no columns")
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(y)

    def back(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _emit("log_softmax", (a,), y, back)


def log(a: Tensor) -> Tensor:
    av = a.values
    return _emit("log", (a,), np.log(av), lambda g: (g / av,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("sum", (a,), np.array([[a.values.sum()]]),
                 lambda g: (np.full(shape, g[0, 0]),))


def mean(a: Tensor) -> Tensor:
    n = a.values.size
    if n == 0:
        raise ShapeError("mean: empty tensor")
    shape = a.shape
    return _emit("mean", (a,), np.array([[a.values.sum() / n]]),
                 lambda g: (np.full(shape, g[0, 0] / n),))


def sq_norm(a: Tensor) -> Tensor:
    """Sum of squared entries."""
    av = a.values
    return _emit("sq_norm", (a,), np.array([[np.sum(av * av)]]),
                 lambda g: (2.0 * g[0, 0] * av,))


def row_sq_dist(a: Tensor, b: Tensor) -> Tensor:
    """Per-row squared distance ||a_i - b_i||^2 as an N x 1 column."""
    if a.shape != b.shape:
        raise ShapeError(f"row_sq_dist: shapes {a.shape} and {b.shape} do not conform")
    diff = a.values - b.values

    def back(g):
        ga = 2.0 * g * diff
        return ga, -ga

    return _emit("row_sq_dist", (a, b), np.sum(diff * diff, axis=1, keepdims=True), back)


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two 1 x d vectors."""
    if a.shape != b.shape or a.rows != 1:
        raise ShapeError(f"cosine: shapes {a.shape} and {b.shape} do not conform")
    u, v = a.values, b.values
    nu, nv = math.sqrt(float(np.sum(u * u))), math.sqrt(float(np.sum(v * v)))
    if nu == 0.0 or nv == 0.0:
        raise NumericError("cosine: zero-norm vector")
    c = float(np.sum(u * v)) / (nu * nv)

    def back(g):
        s = g[0, 0]
        return (s * (v / (nu * nv) - c * u / (nu * nu)),
                s * (u / (nu * nv) - c * v / (nv * nv)))

    return _emit("cosine", (a, b), np.array([[c]]), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no inputs")
    other = 1 - axis
    widths = {t.shape[other] for t in tensors}
    if len(widths) != 1:
        raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} do not conform on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit("concat", tuple(tensors), np.concatenate([t.values for t in tensors], axis=axis), back)


def pick(a: Tensor, labels: np.ndarray) -> Tensor:
    """One-hot row selection: out[i, 0] = a[i, labels[i]]."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (a.rows,):
        raise ShapeError(f"pick: shape {a.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= a.cols):
        raise ShapeError(f"pick: labels out of range for shape {a.shape}")
    idx = np.arange(a.rows)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        out[idx, labels] = g[:, 0]
        return (out,)

    return _emit("pick", (a,), a.values[idx, labels].reshape(-1, 1), back)


def take_rows(a: Tensor, rows: Sequence[int]) -> Tensor:
    rows = np.asarray(rows, dtype=np.int64)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, rows, g)
        return (out,)

    return _emit("take_rows", (a,), a.values[rows], back)


# --- optimisation ---------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t_adam: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> None:
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise GraphError(f"adam_step: no gradient for {missing}")
    state.t_adam += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t_adam
    bc2 = 1.0 - b2 ** state.t_adam
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.values -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# --- gradient checking ----------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple[str, tuple[int, int]] | None
    checked: int
    passed: bool


def finite_diff_check(params: Mapping[str, Tensor], loss_fn: Callable[[], Tensor],
                      step: float = 1e-5, tol: float = 1e-4, n_probe: int | None = None,
                      seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` must build its loss from the tensors in ``params``. With
    ``n_probe`` set, that many coordinates are drawn at random across all
    parameters; otherwise every coordinate is checked.
    """
    for p in params.values():
        p.grad = None
    with Graph() as g:
        loss = loss_fn()
    if not math.isfinite(loss.item()):
        raise NumericError(f"non-finite loss {loss.item()} at the unperturbed point")
    g.backward(loss)

    coords = [(name, idx) for name, p in params.items() for idx in np.ndindex(*p.shape)]
    if n_probe is not None and n_probe < len(coords):
        rng = np.random.default_rng(seed)
        coords = [coords[i] for i in sorted(rng.choice(len(coords), n_probe, replace=False))]

    worst, worst_err = None, 0.0
    for name, idx in coords:
        p = params[name]
        orig = p.values[idx]
        p.values[idx] = orig + step
        up = loss_fn().item()
        p.values[idx] = orig - step
        down = loss_fn().item()
        p.values[idx] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise NumericError(f"non-finite loss probing {name}{idx}")
        numeric = (up - down) / (2.0 * step)
        analytic = float(p.grad[idx])
        err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
        if err > worst_err or worst is None:
            worst, worst_err = (name, tuple(int(i) for i in idx)), err
    return GradCheckReport(worst_err, worst, len(coords), worst_err <= tol)
