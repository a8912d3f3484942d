"""A small reverse-mode automatic differentiation engine over 2-D float64 arrays.

Every value is a ``Node`` wrapping a ``(rows, cols)`` array. Primitives record
their parents and a backward closure whenever an input requires gradients;
``backward`` orders the recorded graph topologically (the ``Tape``) and
propagates adjoints from a 1x1 loss.

Forward matrix products go through ``np.einsum`` rather than BLAS so that each
output row depends only on its input row. The graph attention model relies on
this to make mini-batched and full-graph inference bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericFailure, ShapeError

Tensor2 = np.ndarray


def as_tensor2(x) -> Tensor2:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"expected a 2-D tensor, got shape {a.shape}")
    return a


class Node:
    __slots__ = ("value", "_grad", "parents", "backward_fn", "requires_grad", "op", "name")

    def __init__(self, value, requires_grad: bool = False, parents: tuple = (), backward_fn=None, op: str = "leaf", name: str | None = None):
        self.value = as_tensor2(value)
        self._grad: np.ndarray | None = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.op = op
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g: np.ndarray | None) -> None:
        self._grad = g

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def param(value, name: str | None = None) -> Node:
    return Node(np.array(value, dtype=np.float64, copy=True), requires_grad=True, name=name)


def constant(value) -> Node:
    return Node(value, requires_grad=False)


def _node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(op: str, value: np.ndarray, parents: tuple[Node, ...], backward_fn: Callable[[np.ndarray], tuple]) -> Node:
    if not np.isfinite(value).all():
        raise NumericFailure(f"primitive '{op}' produced non-finite values")
    if any(p.requires_grad for p in parents):
        return Node(value, True, parents, backward_fn, op)
    return Node(value, False, (), None, op)


def _same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise / linear ------------------------------------------------------


def add(a, b) -> Node:
    a, b = _node(a), _node(b)
    _same_shape("add", a, b)
    return _make("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Node:
    a, b = _node(a), _node(b)
    _same_shape("sub", a, b)
    return _make("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Node:
    a, b = _node(a), _node(b)
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _make("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a, c: float) -> Node:
    a = _node(a)
    return _make("scale", a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Node:
    a, b = _node(a), _node(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _make("matmul", np.einsum("ik,kj->ij", av, bv), (a, b), lambda g: (g @ bv.T, av.T @ g))


def broadcast_add_row(x, bias) -> Node:
    x, bias = _node(x), _node(bias)
    if bias.shape != (1, x.shape[1]):
        raise ShapeError(f"broadcast_add_row: bias {bias.shape} does not fit rows of {x.shape}")
    return _make("broadcast_add_row", x.value + bias.value, (x, bias), lambda g: (g, g.sum(axis=0, keepdims=True)))


def transpose(x) -> Node:
    x = _node(x)
    return _make("transpose", np.ascontiguousarray(x.value.T), (x,), lambda g: (g.T,))


def reshape(x, rows: int, cols: int) -> Node:
    x = _node(x)
    if x.value.size != rows * cols:
        raise ShapeError(f"reshape: cannot view {x.shape} as ({rows}, {cols})")
    shape = x.shape
    return _make("reshape", x.value.reshape(rows, cols), (x,), lambda g: (g.reshape(shape),))


def concat_cols(xs: Sequence) -> Node:
    xs = [_node(x) for x in xs]
    rows = {x.shape[0] for x in xs}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {[x.shape for x in xs]}")
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])
    return _make(
        "concat_cols",
        np.concatenate([x.value for x in xs], axis=1),
        tuple(xs),
        lambda g: tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs))),
    )


def concat_rows(xs: Sequence) -> Node:
    xs = [_node(x) for x in xs]
    cols = {x.shape[1] for x in xs}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts differ {[x.shape for x in xs]}")
    bounds = np.cumsum([0] + [x.shape[0] for x in xs])
    return _make(
        "concat_rows",
        np.concatenate([x.value for x in xs], axis=0),
        tuple(xs),
        lambda g: tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(xs))),
    )


def slice_cols(x, start: int, stop: int) -> Node:
    x = _node(x)
    if not 0 <= start <= stop <= x.shape[1]:
        raise ShapeError(f"slice_cols: [{start}, {stop}) outside {x.shape}")
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _make("slice_cols", x.value[:, start:stop].copy(), (x,), back)


def _scatter_add(values: np.ndarray, index: np.ndarray, n_rows: int) -> np.ndarray:
    """Row scatter-add; each output row accumulates its inputs in index order."""
    out = np.empty((n_rows, values.shape[1]))
    for j in range(values.shape[1]):
        out[:, j] = np.bincount(index, weights=values[:, j], minlength=n_rows)
    return out


def gather_rows(x, index) -> Node:
    x = _node(x)
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {x.shape}")
    shape = x.shape

    def back(g):
        return (_scatter_add(g, index, shape[0]),)

    return _make("gather_rows", x.value[index], (x,), back)


def scale_rows(x, w) -> Node:
    """Multiply row i of ``x`` by the scalar ``w[i, 0]``."""
    x, w = _node(x), _node(w)
    if w.shape != (x.shape[0], 1):
        raise ShapeError(f"scale_rows: weights {w.shape} do not match {x.shape}")
    xv, wv = x.value, w.value
    return _make("scale_rows", xv * wv, (x, w), lambda g: (g * wv, (g * xv).sum(axis=1, keepdims=True)))


def segment_sum(x, segments, n_segments: int) -> Node:
    """Sum rows of ``x`` into ``n_segments`` buckets; accumulation follows row order."""
    x = _node(x)
    segments = np.asarray(segments, dtype=np.intp)
    if len(segments) != x.shape[0]:
        raise ShapeError(f"segment_sum: {len(segments)} segment ids for {x.shape[0]} rows")
    out = _scatter_add(x.value, segments, n_segments)
    return _make("segment_sum", out, (x,), lambda g: (g[segments],))


def segment_softmax(scores, segments, n_segments: int) -> Node:
    """Softmax of an (E, 1) score column within each segment (max-shifted)."""
    scores = _node(scores)
    segments = np.asarray(segments, dtype=np.intp)
    if scores.shape != (len(segments), 1):
        raise ShapeError(f"segment_softmax: scores {scores.shape} vs {len(segments)} segment ids")
    s = scores.value[:, 0]
    mx = np.full(n_segments, -np.inf)
    np.maximum.at(mx, segments, s)
    e = np.exp(s - mx[segments])
    z = np.bincount(segments, weights=e, minlength=n_segments)
    alpha = (e / z[segments])[:, None]

    def back(g):
        ga = g * alpha
        tot = np.bincount(segments, weights=ga[:, 0], minlength=n_segments)
        return (ga - alpha * tot[segments][:, None],)

    return _make("segment_softmax", alpha, (scores,), back)


# -- nonlinearities -------------------------------------------------------------


def relu(x) -> Node:
    x = _node(x)
    m = x.value > 0
    return _make("relu", np.where(m, x.value, 0.0), (x,), lambda g: (g * m,))


def leaky_relu(x, slope: float = 0.2) -> Node:
    x = _node(x)
    m = x.value > 0
    d = np.where(m, 1.0, slope)
    return _make("leaky_relu", x.value * d, (x,), lambda g: (g * d,))


def tanh(x) -> Node:
    x = _node(x)
    y = np.tanh(x.value)
    return _make("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Node:
    x = _node(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _make("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def softmax_rows(x) -> Node:
    x = _node(x)
    z = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    return _make("softmax_rows", y, (x,), lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))


def dropout(x, p: float, seed: int | np.random.Generator | None, train: bool) -> Node:
    """Inverted dropout. Identity (the same node) when ``train`` is false."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {p}")
    x = _node(x)
    if not train or p == 0.0:
        return x
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make("dropout", x.value * keep, (x,), lambda g: (g * keep,))


# -- reductions / losses --------------------------------------------------------


def sum_all(x) -> Node:
    x = _node(x)
    shape = x.shape
    return _make("sum", np.array([[x.value.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),))


def mean(x) -> Node:
    x = _node(x)
    shape = x.shape
    n = x.value.size
    return _make("mean", np.array([[x.value.mean()]]), (x,), lambda g: (np.full(shape, g[0, 0] / n),))


def mse(pred, target) -> Node:
    pred, target = _node(pred), _node(target)
    _same_shape("mse", pred, target)
    diff = pred.value - target.value
    n = diff.size
    return _make(
        "mse",
        np.array([[np.mean(diff * diff)]]),
        (pred, target),
        lambda g: (g[0, 0] * 2.0 * diff / n, -g[0, 0] * 2.0 * diff / n),
    )


# -- backward -------------------------------------------------------------------


@dataclass
class Tape:
    """Topologically ordered nodes of one recorded forward pass (parents first)."""

    nodes: list[Node]

    @classmethod
    def from_output(cls, out: Node) -> "Tape":
        order: list[Node] = []
        seen: set[int] = set()
        stack: list[tuple[Node, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)


def backward(loss: Node) -> Tape:
    """Populate ``.grad`` on every leaf that requires gradients.

    Leaf gradients accumulate across calls (call ``zero_grad`` between steps);
    interior nodes receive the adjoint from this pass only.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a 1x1 loss, got shape {loss.shape}")
    tape = Tape.from_output(loss)
    adj: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(tape.nodes):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            adj[key] = adj[key] + pg if key in adj else pg
    return tape


def zero_grads(params: Iterable[Node]) -> None:
    for p in params:
        p.zero_grad()


# -- gradient checking ----------------------------------------------------------


@dataclass
class GradCheckResult:
    passed: bool
    max_rel_error: float
    worst_param: int
    worst_index: tuple[int, int]
    analytic: float
    numeric: float


def grad_check(
    f: Callable[[], Node],
    params: Sequence[Node],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckResult:
    """Compare backprop gradients with central differences.

    ``f`` rebuilds the scalar loss from the current parameter values and must
    be deterministic. Relative error is ``|a - n| / max(|a|, |n|, floor)``;
    the floor keeps near-zero gradients from dominating on round-off alone.
    """
    zero_grads(params)
    backward(f())
    analytic = [p.grad.copy() for p in params]

    worst = GradCheckResult(True, 0.0, -1, (-1, -1), 0.0, 0.0)
    for pi, p in enumerate(params):
        it = np.nditer(p.value, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p.value[idx]
            p.value[idx] = orig + step
            up = f().item()
            p.value[idx] = orig - step
            down = f().item()
            p.value[idx] = orig
            num = (up - down) / (2 * step)
            a = analytic[pi][idx]
            rel = abs(a - num) / max(abs(a), abs(num), floor)
            if rel > worst.max_rel_error or worst.worst_param < 0:
                worst = GradCheckResult(True, rel, pi, idx, float(a), float(num))
    worst.passed = worst.max_rel_error < tolerance
    return worst
