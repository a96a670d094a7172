"""Minimal deterministic reverse-mode automatic differentiation.

Tensors are dense float64 arrays recorded on a :class:`Graph` (a Wengert
list).  The backward pass visits nodes in strict reverse insertion order, so
gradient accumulation order is fixed and two identical forward passes produce
bit-identical gradients.

Reductions (``sum``, ``mean-over-axis``, ``log-sum-exp-over-axis``, softmax
denominators) use an adjacent-pair halving tree instead of numpy's internal
reduction.  Combined with callers sorting set elements into a canonical order,
this makes mean-pooling bitwise invariant to input permutations and exact
under element duplication.

Elementwise binary ops broadcast with numpy semantics; ``matmul`` is strict
2-d.  A single graph is single-threaded; independent graphs share no mutable
state and may run on separate threads.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

__all__ = [
    "Graph",
    "Tensor",
    "REGISTERED_OPS",
    "forward_op",
    "concat",
    "finite_difference_check",
    "check_registered_op_gradients",
]


def pairwise_sum(values: np.ndarray, axis: int) -> np.ndarray:
    """Deterministic adjacent-pair halving sum along ``axis`` (axis dropped).

    Pairing (0,1),(2,3),... with a trailing odd element carried unpaired makes
    the reduction of a sorted, exactly-duplicated sequence equal to twice the
    reduction of the originals (binary floats scale by 2 exactly).
    """
    a = np.moveaxis(np.asarray(values, dtype=np.float64), axis, 0)
    while a.shape[0] > 1:
        n = a.shape[0]
        if n % 2:
            a = np.concatenate([a[0 : n - 1 : 2] + a[1:n:2], a[n - 1 : n]], axis=0)
        else:
            a = a[0::2] + a[1::2]
    return a[0]


def _full_pairwise_sum(values: np.ndarray) -> np.ndarray:
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    if flat.size == 0:
        return np.float64(0.0)
    return pairwise_sum(flat, 0)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after a broadcasting forward op."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense float64 array recorded as one node of a differentiation graph."""

    __slots__ = ("graph", "node_id", "values")

    def __init__(self, graph: "Graph", node_id: int, values: np.ndarray):
        self.graph = graph
        self.node_id = node_id
        self.values = values

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return f"Tensor(node_id={self.node_id}, shape={self.shape})"

    # -- operator sugar, all routed through forward_op ---------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.graph is not self.graph:
                raise ContractError("operands live on different graphs")
            return other
        return self.graph.tensor(other)

    def __add__(self, other):
        return forward_op("add", [self, self._coerce(other)])

    def __radd__(self, other):
        return forward_op("add", [self._coerce(other), self])

    def __sub__(self, other):
        return forward_op("subtract", [self, self._coerce(other)])

    def __rsub__(self, other):
        return forward_op("subtract", [self._coerce(other), self])

    def __mul__(self, other):
        return forward_op("multiply", [self, self._coerce(other)])

    def __rmul__(self, other):
        return forward_op("multiply", [self._coerce(other), self])

    def __matmul__(self, other):
        return forward_op("matmul", [self, self._coerce(other)])

    def __neg__(self):
        return forward_op("negate", [self])

    def exp(self):
        return forward_op("exp", [self])

    def log(self):
        return forward_op("log", [self])

    def relu(self):
        return forward_op("relu", [self])

    def elu(self):
        return forward_op("elu", [self])

    def sigmoid(self):
        return forward_op("sigmoid", [self])

    def square(self):
        return forward_op("square", [self])

    def sum(self, axis=None, keepdims=False):
        return forward_op("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis, keepdims=False):
        return forward_op("mean-over-axis", [self], axis=axis, keepdims=keepdims)

    def logsumexp(self, axis, keepdims=False):
        return forward_op("log-sum-exp-over-axis", [self], axis=axis, keepdims=keepdims)

    def softmax(self, axis):
        return forward_op("softmax-over-axis", [self], axis=axis)

    def slice(self, axis, start, stop):
        return forward_op("slice", [self], axis=axis, start=start, stop=stop)


class _Node:
    __slots__ = ("op", "shape", "vjp")

    def __init__(self, op: str, shape: tuple, vjp):
        self.op = op
        self.shape = shape
        self.vjp = vjp  # None for leaves; else grad -> [(input_id, contribution)]


class Graph:
    """Append-only operation record; insertion order is topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def tensor(self, values, shape=None) -> Tensor:
        """Record a leaf tensor (parameter, input, or constant)."""
        arr = np.asarray(values, dtype=np.float64)
        if shape is not None:
            if int(np.prod(shape)) != arr.size:
                raise DimensionError(
                    f"leaf tensor: {arr.size} values do not fill shape {tuple(shape)}"
                )
            arr = arr.reshape(shape)
        node_id = len(self.nodes)
        self.nodes.append(_Node("leaf", arr.shape, None))
        return Tensor(self, node_id, arr)

    def _record(self, op: str, values: np.ndarray, vjp) -> Tensor:
        node_id = len(self.nodes)
        self.nodes.append(_Node(op, values.shape, vjp))
        return Tensor(self, node_id, values)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradients of a scalar ``loss`` w.r.t. every node in the graph.

        Accumulation happens in strict reverse insertion order; leaves the
        loss does not depend on get exact zeros.
        """
        if not self.nodes:
            raise ContractError("backward: graph is empty")
        if loss.graph is not self:
            raise ContractError("backward: loss belongs to a different graph")
        if loss.shape != ():
            raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
        grads: list = [None] * len(self.nodes)
        grads[loss.node_id] = np.ones((), dtype=np.float64)
        for node_id in range(len(self.nodes) - 1, -1, -1):
            g = grads[node_id]
            if g is None:
                continue
            node = self.nodes[node_id]
            if node.vjp is None:
                continue
            for input_id, contribution in node.vjp(g):
                if grads[input_id] is None:
                    grads[input_id] = np.zeros(self.nodes[input_id].shape, dtype=np.float64)
                grads[input_id] += contribution
        out = {}
        for node_id, node in enumerate(self.nodes):
            out[node_id] = (
                grads[node_id]
                if grads[node_id] is not None
                else np.zeros(node.shape, dtype=np.float64)
            )
        return out


# ---------------------------------------------------------------------------
# Op registry
# ---------------------------------------------------------------------------


def _op_matmul(g: Graph, a: Tensor, b: Tensor):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = a.values @ b.values
    av, bv = a.values, b.values

    def vjp(grad):
        return [(a.node_id, grad @ bv.T), (b.node_id, av.T @ grad)]

    return out, vjp


def _broadcast_binary(name, fn, da, db):
    def impl(g: Graph, a: Tensor, b: Tensor):
        av, bv, ash, bsh = a.values, b.values, a.shape, b.shape
        if ash != bsh:
            try:
                np.broadcast_shapes(ash, bsh)
            except ValueError:
                raise DimensionError(f"{name}: shapes {ash} and {bsh} do not broadcast")
        out = fn(av, bv)

        def vjp(grad):
            return [
                (a.node_id, _unbroadcast(da(grad, av, bv), ash)),
                (b.node_id, _unbroadcast(db(grad, av, bv), bsh)),
            ]

        return out, vjp

    return impl


def _op_exp(g: Graph, x: Tensor):
    out = np.exp(x.values)
    return out, lambda grad: [(x.node_id, grad * out)]


def _op_log(g: Graph, x: Tensor):
    if np.any(x.values <= 0.0):
        raise DomainError("log: input has non-positive entries")
    out = np.log(x.values)
    xv = x.values
    return out, lambda grad: [(x.node_id, grad / xv)]


def _op_negate(g: Graph, x: Tensor):
    return -x.values, lambda grad: [(x.node_id, -grad)]


def _op_relu(g: Graph, x: Tensor):
    out = np.maximum(x.values, 0.0)
    mask = (x.values > 0.0).astype(np.float64)
    return out, lambda grad: [(x.node_id, grad * mask)]


def _op_elu(g: Graph, x: Tensor):
    neg = np.expm1(x.values)
    out = np.where(x.values > 0.0, x.values, neg)
    slope = np.where(x.values > 0.0, 1.0, neg + 1.0)
    return out, lambda grad: [(x.node_id, grad * slope)]


def _op_sigmoid(g: Graph, x: Tensor):
    v = x.values
    out = np.where(v >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return out, lambda grad: [(x.node_id, grad * out * (1.0 - out))]


def _op_square(g: Graph, x: Tensor):
    xv = x.values
    return xv * xv, lambda grad: [(x.node_id, grad * 2.0 * xv)]


def _check_axis(name, x, axis):
    if not isinstance(axis, int) or not (0 <= axis < x.ndim):
        raise DimensionError(f"{name}: axis {axis} invalid for shape {x.shape}")


def _op_sum(g: Graph, x: Tensor, axis=None, keepdims=False):
    if axis is None:
        out = _full_pairwise_sum(x.values)
        shape = x.shape

        def vjp(grad):
            return [(x.node_id, np.broadcast_to(grad, shape).astype(np.float64))]

        return np.asarray(out), vjp
    _check_axis("sum", x, axis)
    out = pairwise_sum(x.values, axis)
    if keepdims:
        out = np.expand_dims(out, axis)
    shape = x.shape

    def vjp(grad):
        ge = grad if keepdims else np.expand_dims(grad, axis)
        return [(x.node_id, np.broadcast_to(ge, shape).astype(np.float64))]

    return out, vjp


def _op_mean_over_axis(g: Graph, x: Tensor, axis, keepdims=False):
    _check_axis("mean-over-axis", x, axis)
    n = x.shape[axis]
    if n == 0:
        raise DimensionError(f"mean-over-axis: empty axis {axis} in shape {x.shape}")
    out = pairwise_sum(x.values, axis) / n
    if keepdims:
        out = np.expand_dims(out, axis)
    shape = x.shape

    def vjp(grad):
        ge = grad if keepdims else np.expand_dims(grad, axis)
        return [(x.node_id, np.broadcast_to(ge / n, shape).astype(np.float64))]

    return out, vjp


def _op_concat(g: Graph, *xs: Tensor, axis=0):
    if not xs:
        raise DimensionError("concat: needs at least one input")
    _check_axis("concat", xs[0], axis)
    base = list(xs[0].shape)
    for t in xs[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis
        ):
            raise DimensionError(
                f"concat: shape {t.shape} incompatible with {xs[0].shape} along axis {axis}"
            )
    out = np.concatenate([t.values for t in xs], axis=axis)
    sizes = [t.shape[axis] for t in xs]

    def vjp(grad):
        pieces = []
        offset = 0
        for t, n in zip(xs, sizes):
            sl = [slice(None)] * grad.ndim
            sl[axis] = slice(offset, offset + n)
            pieces.append((t.node_id, grad[tuple(sl)]))
            offset += n
        return pieces

    return out, vjp


def _op_slice(g: Graph, x: Tensor, axis, start, stop):
    _check_axis("slice", x, axis)
    if not (0 <= start < stop <= x.shape[axis]):
        raise DimensionError(
            f"slice: bounds [{start}, {stop}) invalid for axis {axis} of shape {x.shape}"
        )
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    out = x.values[tuple(sl)]
    shape = x.shape

    def vjp(grad):
        full = np.zeros(shape, dtype=np.float64)
        full[tuple(sl)] = grad
        return [(x.node_id, full)]

    return out, vjp


def _op_logsumexp(g: Graph, x: Tensor, axis, keepdims=False):
    _check_axis("log-sum-exp-over-axis", x, axis)
    m = np.max(x.values, axis=axis, keepdims=True)
    shifted = np.exp(x.values - m)
    total = pairwise_sum(shifted, axis)
    out_kept = np.squeeze(m, axis=axis) + np.log(total)
    out = np.expand_dims(out_kept, axis) if keepdims else out_kept

    def vjp(grad):
        soft = shifted / np.expand_dims(total, axis)
        ge = grad if keepdims else np.expand_dims(grad, axis)
        return [(x.node_id, ge * soft)]

    return out, vjp


def _op_softmax(g: Graph, x: Tensor, axis):
    _check_axis("softmax-over-axis", x, axis)
    m = np.max(x.values, axis=axis, keepdims=True)
    shifted = np.exp(x.values - m)
    total = np.expand_dims(pairwise_sum(shifted, axis), axis)
    out = shifted / total

    def vjp(grad):
        inner = np.expand_dims(pairwise_sum(grad * out, axis), axis)
        return [(x.node_id, out * (grad - inner))]

    return out, vjp


REGISTERED_OPS: dict[str, Callable] = {
    "matmul": _op_matmul,
    "add": _broadcast_binary("add", np.add, lambda g, a, b: g, lambda g, a, b: g),
    "multiply": _broadcast_binary(
        "multiply", np.multiply, lambda g, a, b: g * b, lambda g, a, b: g * a
    ),
    "subtract": _broadcast_binary(
        "subtract", np.subtract, lambda g, a, b: g, lambda g, a, b: -g
    ),
    "exp": _op_exp,
    "log": _op_log,
    "negate": _op_negate,
    "relu": _op_relu,
    "elu": _op_elu,
    "sigmoid": _op_sigmoid,
    "sum": _op_sum,
    "mean-over-axis": _op_mean_over_axis,
    "concat": _op_concat,
    "slice": _op_slice,
    "square": _op_square,
    "log-sum-exp-over-axis": _op_logsumexp,
    "softmax-over-axis": _op_softmax,
}


def forward_op(name: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Apply a registered op to ``inputs``, recording the node on their graph."""
    impl = REGISTERED_OPS.get(name)
    if impl is None:
        raise ContractError(f"unknown operation {name!r}")
    if not inputs:
        raise ContractError(f"{name}: no inputs")
    graph = inputs[0].graph
    for t in inputs[1:]:
        if t.graph is not graph:
            raise ContractError(f"{name}: inputs live on different graphs")
    values, vjp = impl(graph, *inputs, **kwargs)
    if not isinstance(values, np.ndarray) or values.dtype != np.float64:
        values = np.asarray(values, dtype=np.float64)
    # NaN guard: a NaN makes the full sum NaN; confirm precisely before raising
    # so arrays mixing +inf and -inf (no NaN) are not misreported.
    if np.isnan(np.sum(values)) and np.isnan(values).any():
        raise DomainError(f"{name}: produced NaN output")
    return graph._record(name, values, vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return forward_op("concat", list(tensors), axis=axis)


# ---------------------------------------------------------------------------
# Verification oracle: central finite differences
# ---------------------------------------------------------------------------


def finite_difference_check(
    f: Callable[[Tensor], Tensor], point, step: float = 1e-5
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must build a scalar tensor from a single leaf tensor on that leaf's
    graph.  Error per coordinate is |analytic - fd| / max(1, |analytic|).
    """
    if step <= 0:
        raise ContractError(f"finite_difference_check: step must be > 0, got {step}")
    point = np.asarray(point, dtype=np.float64)

    g = Graph()
    x = g.tensor(point)
    y = f(x)
    if y.shape != ():
        raise ContractError("finite_difference_check: f must be scalar-valued")
    analytic = g.backward(y)[x.node_id]

    def scalar_at(p: np.ndarray) -> float:
        gg = Graph()
        out = f(gg.tensor(p))
        return float(out.values)

    worst = 0.0
    flat = point.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += step
        hi = scalar_at(bumped.reshape(point.shape))
        bumped[i] -= 2.0 * step
        lo = scalar_at(bumped.reshape(point.shape))
        fd = (hi - lo) / (2.0 * step)
        a = analytic.reshape(-1)[i]
        if not (np.isfinite(fd) and np.isfinite(a)):
            raise DomainError("finite_difference_check: non-finite intermediate")
        worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst


def _random_away_from_kinks(stream, shape, margin=0.05):
    v = stream.normal(shape)
    return np.where(np.abs(v) < margin, margin + np.abs(v), v)


def check_registered_op_gradients(stream, instances: int = 10, step: float = 1e-5) -> dict[str, float]:
    """Run finite-difference checks for every registered op.

    Returns the max relative error per op over ``instances`` seeded random
    inputs.  Inputs for relu/elu stay away from the kink at zero so the
    central difference is valid.
    """
    results: dict[str, float] = {}

    def probe(name, make_scalar, point):
        worst = results.get(name, 0.0)
        results[name] = max(worst, finite_difference_check(make_scalar, point, step))

    for k in range(instances):
        s = stream.split("opcheck", k)
        a = s.normal((3, 4))
        b = s.normal((4, 2))
        probe("matmul", lambda x, b=b: ((x @ x.graph.tensor(b)).square()).sum(), a)
        c = s.normal((3, 4))
        probe("add", lambda x, c=c: ((x + x.graph.tensor(c)).square()).sum(), a)
        probe("subtract", lambda x, c=c: ((x - x.graph.tensor(c)).square()).sum(), a)
        probe("multiply", lambda x, c=c: ((x * x.graph.tensor(c)).square()).sum(), a)
        probe("exp", lambda x: (x * 0.3).exp().sum(), a)
        pos = np.abs(s.normal((5,))) + 0.5
        probe("log", lambda x: x.log().square().sum(), pos)
        probe("negate", lambda x: (-x).square().sum(), a)
        kinked = _random_away_from_kinks(s, (3, 4))
        probe("relu", lambda x: x.relu().square().sum(), kinked)
        probe("elu", lambda x: x.elu().square().sum(), kinked)
        probe("sigmoid", lambda x: x.sigmoid().square().sum(), a)
        probe("square", lambda x: x.square().sum(), a)
        probe("sum", lambda x: x.sum(axis=1).square().sum(), a)
        probe("mean-over-axis", lambda x: x.mean(axis=0).square().sum(), a)
        probe(
            "concat",
            lambda x: concat([x.slice(0, 0, 1), x.slice(0, 1, 3)], axis=0).square().sum(),
            a,
        )
        probe("slice", lambda x: x.slice(1, 1, 3).square().sum(), a)
        probe("log-sum-exp-over-axis", lambda x: x.logsumexp(axis=1).square().sum(), a)
        probe("softmax-over-axis", lambda x: (x.softmax(axis=1).square()).sum(), a)
    return results
