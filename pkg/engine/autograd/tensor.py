"""
Tensor — a dense float64 array plus the bookkeeping reverse-mode autodiff needs.

Think of every operation as writing one line into a tape:
  "node 17 = conv2d(node 3, node 4), and here's how to push a gradient back."
Node ids come from one global counter, so creation order IS topological
order (a node can only use nodes that already exist). backward() walks the
reachable nodes from newest to oldest, exactly once each.

Rules this module sticks to:
  - 64-bit floats everywhere.
  - No broadcasting except tensor-with-scalar. Anything fancier goes through
    an explicit expand()/reshape() so every gradient rule stays auditable.
  - Tensors are never mutated by ops. The optimizer swaps in new arrays for
    parameters between steps.
"""

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from engine.errors import DomainError, ShapeError

_node_ids = itertools.count()

# Backward rule: upstream gradient in, one gradient (or None) per parent out
BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """A node in the autodiff graph: value, optional gradient, and how it was made."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.parents: tuple["Tensor", ...] = ()
        self._backward: BackwardFn | None = None
        self.node_id = next(_node_ids)

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...], op: str,
                 backward: BackwardFn) -> "Tensor":
        """Record an op result. Constant inputs never make it onto the tape."""
        out = cls.__new__(cls)
        out.data = np.require(np.asarray(data, dtype=np.float64), requirements="C")
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out.op = op
        out.parents = parents if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out.node_id = next(_node_ids)
        return out

    # ── basic info ──

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        """Same values, cut off from the graph."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.op = "leaf"
        out.parents = ()
        out._backward = None
        out.node_id = next(_node_ids)
        return out

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, op={self.op}{flag})"

    # ── operator sugar ──

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
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _sum_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Undo tensor-with-scalar broadcasting in the backward pass."""
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


# ─── GRAPH ───

@dataclass
class Graph:
    """
    The slice of the tape that feeds one output.

    nodes are in creation order (= topological order); backward visits them
    in reverse, each once.
    """
    nodes: list[Tensor] = field(default_factory=list)
    output: Tensor | None = None

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        seen: dict[int, Tensor] = {}
        stack = [output]
        while stack:
            node = stack.pop()
            if node.node_id in seen or not node.requires_grad:
                continue
            seen[node.node_id] = node
            stack.extend(node.parents)
        nodes = sorted(seen.values(), key=lambda t: t.node_id)
        return cls(nodes=nodes, output=output)

    def backward(self):
        if self.output is None or not self.output.requires_grad:
            return
        # Intermediate gradients live for one pass; leaves accumulate across passes
        pending: dict[int, np.ndarray] = {self.output.node_id: np.ones_like(self.output.data)}
        for node in reversed(self.nodes):
            upstream = pending.pop(node.node_id, None)
            if upstream is None:
                continue
            if node._backward is None:
                node.grad = upstream.copy() if node.grad is None else node.grad + upstream
                continue
            node.grad = upstream
            for parent, grad in zip(node.parents, node._backward(upstream)):
                if grad is None or not parent.requires_grad:
                    continue
                if parent.node_id in pending:
                    pending[parent.node_id] = pending[parent.node_id] + grad
                else:
                    pending[parent.node_id] = grad


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf feeding `loss`."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    Graph.trace(loss).backward()


# ─── ELEMENTWISE ───

def _binary_shapes(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shapes(a, b, "add")
    return Tensor._from_op(
        a.data + b.data, (a, b), "add",
        lambda g: (_sum_to(g, a.shape), _sum_to(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shapes(a, b, "sub")
    return Tensor._from_op(
        a.data - b.data, (a, b), "sub",
        lambda g: (_sum_to(g, a.shape), _sum_to(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shapes(a, b, "mul")
    return Tensor._from_op(
        a.data * b.data, (a, b), "mul",
        lambda g: (_sum_to(g * b.data, a.shape), _sum_to(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shapes(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    return Tensor._from_op(
        a.data / b.data, (a, b), "div",
        lambda g: (_sum_to(g / b.data, a.shape), _sum_to(-g * a.data / (b.data * b.data), b.shape)),
    )


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return Tensor._from_op(out_data, (a,), "exp", lambda g: (g * out_data,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: non-positive operand")
    return Tensor._from_op(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._from_op(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))  # overflow-free logistic
    return Tensor._from_op(s, (a,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def negate(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), "negate", lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return Tensor._from_op(a.data * a.data, (a,), "square", lambda g: (2.0 * a.data * g,))


_UNARY = {"exp": exp, "log": log, "relu": relu, "sigmoid": sigmoid, "negate": negate, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by op name: add/sub/mul/div take two operands, the rest one."""
    if kind in _BINARY:
        if b is None:
            raise ShapeError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ShapeError(f"unknown elementwise op '{kind}'")


# ─── REDUCTIONS ───

def _normalize_axes(a: Tensor, axes) -> tuple[int, ...]:
    if axes is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    axes = tuple(ax % a.ndim if -a.ndim <= ax < a.ndim else ax for ax in axes)
    if not axes:
        raise ShapeError("empty reduction axis")
    for ax in axes:
        if not 0 <= ax < a.ndim:
            raise ShapeError(f"reduction axis {ax} out of range for shape {list(a.shape)}")
        if a.shape[ax] == 0:
            raise ShapeError(f"empty reduction axis {ax}")
    return axes


def _kept_shape(shape, axes):
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


def reduce(kind: str, a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """sum / mean / max / logsumexp over `axes` (None = all)."""
    axes = _normalize_axes(a, axes)
    kept = _kept_shape(a.shape, axes)
    count = int(np.prod([a.shape[ax] for ax in axes]))

    def _finish(values: np.ndarray) -> np.ndarray:
        return values if keepdims else values.reshape(tuple(n for i, n in enumerate(a.shape) if i not in axes))

    if kind == "sum":
        out = a.data.sum(axis=axes, keepdims=True)
        return Tensor._from_op(
            _finish(out), (a,), "sum",
            lambda g: (np.broadcast_to(g.reshape(kept), a.shape).copy(),),
        )
    if kind == "mean":
        out = a.data.sum(axis=axes, keepdims=True) / count
        return Tensor._from_op(
            _finish(out), (a,), "mean",
            lambda g: (np.broadcast_to(g.reshape(kept) / count, a.shape).copy(),),
        )
    if kind == "max":
        out = a.data.max(axis=axes, keepdims=True)
        hits = a.data == out
        share = hits / hits.sum(axis=axes, keepdims=True)  # ties split the gradient
        return Tensor._from_op(_finish(out), (a,), "max", lambda g: (share * g.reshape(kept),))
    if kind == "logsumexp":
        peak = a.data.max(axis=axes, keepdims=True)
        out = peak + np.log(np.exp(a.data - peak).sum(axis=axes, keepdims=True))
        weights = np.exp(a.data - out)
        return Tensor._from_op(_finish(out), (a,), "logsumexp", lambda g: (weights * g.reshape(kept),))
    raise ShapeError(f"unknown reduction '{kind}'")


def sum_(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return reduce("sum", a, axes, keepdims)


def mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return reduce("mean", a, axes, keepdims)


def max_(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return reduce("max", a, axes, keepdims)


def logsumexp(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return reduce("logsumexp", a, axes, keepdims)


def log_softmax(a: Tensor, axis: int) -> Tensor:
    """a − logsumexp(a) along one axis, as a single fused node."""
    axis = _normalize_axes(a, axis)[0]
    peak = a.data.max(axis=axis, keepdims=True)
    lse = peak + np.log(np.exp(a.data - peak).sum(axis=axis, keepdims=True))
    out = a.data - lse
    probs = np.exp(out)
    return Tensor._from_op(
        out, (a,), "log_softmax",
        lambda g: (g - probs * g.sum(axis=axis, keepdims=True),),
    )


# ─── LINEAR ALGEBRA ───

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ ({a.shape[1]} vs {b.shape[0]})")
    return Tensor._from_op(
        a.data @ b.data, (a, b), "matmul",
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def pairwise_sqdist(queries: Tensor, points: Tensor) -> Tensor:
    """
    Squared Euclidean distances between every query row and every point row.

    queries: M×d, points: N×d → M×N. Computed from explicit differences
    (not the ‖q‖²+‖x‖²−2q·x shortcut) so shifting both sets by the same
    vector leaves the result unchanged up to rounding of the inputs.
    """
    if queries.ndim != 2 or points.ndim != 2:
        raise ShapeError("pairwise_sqdist needs 2-D operands")
    if queries.shape[1] != points.shape[1]:
        raise ShapeError(f"pairwise_sqdist: dim mismatch ({queries.shape[1]} vs {points.shape[1]})")
    q, x = queries.data, points.data
    m, n, d = q.shape[0], x.shape[0], q.shape[1]
    out = np.empty((m, n))
    rows = max(1, int(4_000_000 // max(1, n * d)))
    for start in range(0, m, rows):
        diff = q[start:start + rows, None, :] - x[None, :, :]
        out[start:start + rows] = np.einsum("mnd,mnd->mn", diff, diff)

    def _backward(g):
        dq = 2.0 * (g.sum(axis=1)[:, None] * q - g @ x)
        dx = 2.0 * (g.sum(axis=0)[:, None] * x - g.T @ q)
        return dq, dx

    return Tensor._from_op(out, (queries, points), "pairwise_sqdist", _backward)


# ─── SHAPE OPS ───

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(n) for n in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {list(a.shape)} into {list(shape)}")
    return Tensor._from_op(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose axes {axes} don't match rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(
        a.data.transpose(axes), (a,), "transpose",
        lambda g: (g.transpose(inverse),),
    )


def expand(a: Tensor, shape) -> Tensor:
    """Repeat singleton dims up to `shape`; the gradient sums them back."""
    shape = tuple(int(n) for n in shape)
    if len(shape) != a.ndim:
        raise ShapeError(f"expand: rank mismatch {list(a.shape)} → {list(shape)}")
    grown = []
    for i, (have, want) in enumerate(zip(a.shape, shape)):
        if have != want:
            if have != 1:
                raise ShapeError(f"expand: dim {i} has extent {have}, can't grow to {want}")
            grown.append(i)
    grown = tuple(grown)
    return Tensor._from_op(
        np.broadcast_to(a.data, shape), (a,), "expand",
        lambda g: (g.sum(axis=grown, keepdims=True) if grown else g,),
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeError(
                f"concat: shapes {[list(t.shape) for t in tensors]} differ off axis {axis}"
            )
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat",
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where mask is True by a constant; no gradient flows there."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"masked_fill: mask {list(mask.shape)} vs tensor {list(a.shape)}")
    return Tensor._from_op(
        np.where(mask, value, a.data), (a,), "masked_fill",
        lambda g: (np.where(mask, 0.0, g),),
    )
