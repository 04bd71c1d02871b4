"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation that touches a tensor requiring gradients records its inputs
and a backward rule on the output node.  :func:`backward` linearises those
records into a :class:`GraphTape` (topological order) and replays it in
reverse, accumulating gradients into the leaves.

A thread-local :class:`FlopCounter` can be activated with :func:`flop_counter`;
every primitive then reports the floating-point work it actually performed.
"""

from __future__ import annotations

import collections
import contextlib
import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DoubleBackwardError, NonScalarLossError, ShapeMismatchError

_ids = itertools.count()
_state = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference, finite differences)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class FlopCounter:
    """Runtime tally of floating-point operations, keyed by primitive name."""

    def __init__(self) -> None:
        self.by_op: collections.Counter[str] = collections.Counter()

    @property
    def total(self) -> int:
        return sum(self.by_op.values())

    def add(self, op: str, n: int) -> None:
        self.by_op[op] += int(n)


@contextlib.contextmanager
def flop_counter() -> Iterator[FlopCounter]:
    prev = getattr(_state, "flops", None)
    counter = FlopCounter()
    _state.flops = counter
    try:
        yield counter
    finally:
        _state.flops = prev


def record_flops(op: str, n: int) -> None:
    counter = getattr(_state, "flops", None)
    if counter is not None:
        counter.add(op, n)


class KinkMonitor:
    """Smallest distance seen between an argument and a non-differentiable point."""

    def __init__(self) -> None:
        self.margin = np.inf

    def observe(self, distances: np.ndarray) -> None:
        if distances.size:
            self.margin = min(self.margin, float(np.min(distances)))


@contextlib.contextmanager
def kink_monitor() -> Iterator[KinkMonitor]:
    """Track how close ReLU, clamp and max-pool arguments come to their kinks.

    Finite-difference probes closer than a few steps to a kink are not
    meaningful; gradient checks use this to redraw such points.
    """
    prev = getattr(_state, "kinks", None)
    monitor = KinkMonitor()
    _state.kinks = monitor
    try:
        yield monitor
    finally:
        _state.kinks = prev


def record_kinks(distances: np.ndarray) -> None:
    monitor = getattr(_state, "kinks", None)
    if monitor is not None:
        monitor.observe(np.abs(distances))


class Tensor:
    """An n-dimensional float64 array with an optional gradient slot.

    Leaves created with ``requires_grad=True`` carry a zero-initialised
    ``grad`` array that :func:`backward` accumulates into.  Intermediate
    results keep a reference to their parents and a backward rule until the
    graph is consumed.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False) -> None:
        arr = np.array(data, dtype=np.float64)
        _check_shape(arr.shape)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = "leaf"
        self._released = False

    # -- construction helpers -------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"],
                 backward_fn: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.node_id = next(_ids)
        out._op = op
        out._released = False
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -----------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._op == "leaf"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op})"

    # -- arithmetic -----------------------------------------------------
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

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


def _raise_nonscalar():
    raise NonScalarLossError("item() requires a single-element tensor")


def _check_shape(shape: tuple[int, ...]) -> None:
    if any(d < 1 for d in shape):
        raise ShapeMismatchError(f"tensor dimensions must be >= 1, got {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# Graph tape and backward pass
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TapeRecord:
    op: str
    inputs: tuple[int, ...]
    output: int


class GraphTape:
    """Topologically ordered view of the graph that produced ``root``."""

    def __init__(self, root: Tensor) -> None:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for parent in node._parents:
                if parent.node_id not in seen:
                    stack.append((parent, False))
        self.nodes = order

    @property
    def records(self) -> list[TapeRecord]:
        return [
            TapeRecord(n._op, tuple(p.node_id for p in n._parents), n.node_id)
            for n in self.nodes
            if not n.is_leaf
        ]

    def __len__(self) -> int:
        return len(self.nodes)


def _accumulate(grads: dict[int, np.ndarray], key: int, g: np.ndarray) -> None:
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    The graph is released afterwards; a second call on the same loss raises
    :class:`DoubleBackwardError`.
    """
    if loss.data.size != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.shape}")
    if loss._released:
        raise DoubleBackwardError("graph already consumed by a previous backward()")
    if not loss.requires_grad:
        return
    tape = GraphTape(loss)
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.node_id, None)
        if node.is_leaf:
            if g is not None and node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        if g is not None and node._backward is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is not None and parent.requires_grad:
                    _accumulate(grads, parent.node_id, pg)
    for node in tape.nodes:
        if not node.is_leaf:
            node._backward = None
            node._parents = ()
            node._released = True


# ---------------------------------------------------------------------------
# Elementwise and structural primitives
# ---------------------------------------------------------------------------


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(a, b, fwd, da, db, op: str) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = fwd(a.data, b.data)
    record_flops(op, out.size)

    def backward_fn(g):
        return (
            unbroadcast(da(g, a.data, b.data, out), a.shape) if a.requires_grad else None,
            unbroadcast(db(g, a.data, b.data, out), b.shape) if b.requires_grad else None,
        )

    return Tensor._from_op(out, (a, b), backward_fn, op)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y, o: g, lambda g, x, y, o: g, "add")


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y, o: g, lambda g, x, y, o: -g, "sub")


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x, "mul")


def div(a, b) -> Tensor:
    return _binary(
        a, b, np.divide,
        lambda g, x, y, o: g / y,
        lambda g, x, y, o: -g * x / (y * y),
        "div",
    )


def _unary(x, fwd, dfn, op: str) -> Tensor:
    x = as_tensor(x)
    out = fwd(x.data)
    record_flops(op, out.size)

    def backward_fn(g):
        return (dfn(g, x.data, out),)

    return Tensor._from_op(out, (x,), backward_fn, op)


def neg(x) -> Tensor:
    return _unary(x, np.negative, lambda g, v, o: -g, "neg")


def exp(x) -> Tensor:
    return _unary(x, np.exp, lambda g, v, o: g * o, "exp")


def log(x) -> Tensor:
    return _unary(x, np.log, lambda g, v, o: g / v, "log")


def sqrt(x) -> Tensor:
    return _unary(x, np.sqrt, lambda g, v, o: g * 0.5 / o, "sqrt")


def tanh(x) -> Tensor:
    return _unary(x, np.tanh, lambda g, v, o: g * (1.0 - o * o), "tanh")


def relu(x) -> Tensor:
    # subgradient 0 at the kink
    record_kinks(as_tensor(x).data)
    return _unary(x, lambda v: np.maximum(v, 0.0), lambda g, v, o: g * (v > 0), "relu")


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    return _unary(x, _stable_sigmoid, lambda g, v, o: g * o * (1.0 - o), "sigmoid")


def matmul(a, b) -> Tensor:
    """Batched matrix product; both operands need at least two dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul cannot combine {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)
    record_flops("matmul", 2 * out.size * a.shape[-1])

    def backward_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), backward_fn, "matmul")


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)
    record_flops("sum", x.size)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=np.float64), (x,), backward_fn, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    out = np.mean(x.data, axis=axes, keepdims=keepdims)
    record_flops("mean", x.size)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=np.float64), (x,), backward_fn, "mean")


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    _check_shape(out.shape)
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)
    out = np.transpose(x.data, axes)
    return Tensor._from_op(out, (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def clamp_min(x, floor: float) -> Tensor:
    """``max(x, floor)``; gradient passes only where ``x > floor``."""
    record_kinks(as_tensor(x).data - floor)
    return _unary(x, lambda v: np.maximum(v, floor), lambda g, v, o: g * (v > floor), "clamp")
