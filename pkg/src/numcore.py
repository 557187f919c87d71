"""Dense float64 matrix primitives with reverse-mode differentiation.

Every primitive computes its result with numpy and, when a :class:`Tape` is
active on the current thread, appends a record holding the forward function and
a vector-Jacobian closure. ``Tape.backward`` walks those records once in reverse
order and accumulates exact partial derivatives into each :class:`Parameter`.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from src.errors import (
    DeterminismError,
    DimensionError,
    NonFiniteError,
    PreconditionError,
    StaleTapeError,
)

logger = logging.getLogger(__name__)

DTYPE = np.float64

Grad = Optional[np.ndarray]
VjpFn = Callable[[np.ndarray], Tuple[Grad, ...]]


def as_matrix(value) -> np.ndarray:
    """Coerce scalars, vectors and 2-D arrays to a non-empty float64 matrix."""
    array = np.array(value, dtype=DTYPE)
    if array.ndim == 0:
        array = array.reshape(1, 1)
    elif array.ndim == 1:
        array = array.reshape(1, -1)
    elif array.ndim != 2:
        raise DimensionError(f"expected a matrix, got {array.ndim}-d data", [array.shape])
    if array.size == 0:
        raise DimensionError("matrices must have at least one row and column", [array.shape])
    return array


class Node:
    """An immutable matrix value flowing through the tape."""

    def __init__(self, value):
        self.value = as_matrix(value)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise DimensionError("item() needs a 1x1 matrix", [self.shape])
        return float(self.value[0, 0])

    def __add__(self, other) -> "Node":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Node":
        return add(self, scale(as_node(other), -1.0))

    def __neg__(self) -> "Node":
        return scale(self, -1.0)

    def __mul__(self, other) -> "Node":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape})"


class Parameter(Node):
    """A named trainable matrix with a gradient buffer of the same shape."""

    def __init__(self, name: str, value):
        super().__init__(value)
        self.name = name
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_node(value) -> Node:
    return value if isinstance(value, Node) else Node(value)


@dataclass
class _Record:
    kind: str
    inputs: Tuple[Node, ...]
    output: Node
    forward_fn: Callable[..., np.ndarray]
    vjp: VjpFn


_state = threading.local()


def _tape_stack() -> List[Optional["Tape"]]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    """Tape receiving records on this thread, if gradient mode is on."""
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def suspend_tape() -> Iterator[None]:
    """Evaluate without recording, even inside an enclosing tape."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tape:
    """Append-only record of primitive operations for one forward pass.

    Used as a context manager; a tape belongs to the thread that entered it.
    """

    def __init__(self):
        self.records: List[_Record] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, rec: _Record) -> None:
        if self._consumed:
            raise StaleTapeError("cannot record onto a tape that has been differentiated")
        self.records.append(rec)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def parameters(self) -> List[Parameter]:
        """Parameters touched by the recorded operations, in first-use order."""
        seen: Dict[int, Parameter] = {}
        for rec in self.records:
            for node in rec.inputs:
                if isinstance(node, Parameter) and id(node) not in seen:
                    seen[id(node)] = node
        return list(seen.values())

    def _check_loss(self, loss: Node) -> None:
        if loss.shape != (1, 1):
            raise DimensionError("loss must be a 1x1 matrix", [loss.shape])
        if not any(rec.output is loss for rec in self.records):
            raise PreconditionError("loss was not produced on this tape")

    def gradients(self, loss: Node) -> Dict[str, np.ndarray]:
        """Reverse sweep returning d(loss)/d(param) by parameter name.

        Consumes the tape; parameter ``grad`` buffers are left untouched.
        """
        if self._consumed:
            raise StaleTapeError("tape already differentiated; run the forward pass again")
        self._check_loss(loss)
        self._consumed = True

        adjoints: Dict[int, np.ndarray] = {id(loss): np.ones((1, 1), dtype=DTYPE)}
        for rec in reversed(self.records):
            upstream = adjoints.pop(id(rec.output), None)
            if upstream is None:
                continue
            for node, grad in zip(rec.inputs, rec.vjp(upstream)):
                if grad is None:
                    continue
                key = id(node)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + grad
                else:
                    adjoints[key] = grad

        grads: Dict[str, np.ndarray] = {}
        for param in self.parameters():
            grad = adjoints.get(id(param))
            grads[param.name] = np.zeros_like(param.value) if grad is None else grad
        return grads

    def backward(self, loss: Node) -> None:
        """Accumulate exact gradients of ``loss`` into every touched Parameter."""
        grads = self.gradients(loss)
        for param in self.parameters():
            param.grad = param.grad + grads[param.name]

    def replay(self, output: Optional[Node] = None) -> np.ndarray:
        """Recompute the recorded forward pass from leaf values."""
        if not self.records:
            raise PreconditionError("nothing recorded")
        values: Dict[int, np.ndarray] = {}
        for rec in self.records:
            args = [values.get(id(node), node.value) for node in rec.inputs]
            values[id(rec.output)] = rec.forward_fn(*args)
        target = output if output is not None else self.records[-1].output
        return values[id(target)]


def apply_op(
    kind: str,
    forward_fn: Callable[..., np.ndarray],
    make_vjp: Callable[..., VjpFn],
    *inputs: Node,
) -> Node:
    """Run a primitive and record it on the active tape.

    ``make_vjp(out, *input_values)`` returns the vector-Jacobian closure.
    """
    values = [node.value for node in inputs]
    out_value = forward_fn(*values)
    out = Node(out_value)
    tape = active_tape()
    if tape is not None:
        tape.record(_Record(kind, tuple(inputs), out, forward_fn, make_vjp(out.value, *values)))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    for axis in (0, 1):
        if shape[axis] == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(kind: str, a: Node, b: Node) -> None:
    for axis in (0, 1):
        da, db = a.shape[axis], b.shape[axis]
        if da != db and 1 not in (da, db):
            raise DimensionError(f"{kind}: operands do not broadcast", [a.shape, b.shape])


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.cols != b.rows:
        raise DimensionError("matmul: inner dimensions differ", [a.shape, b.shape])

    def vjp_factory(out, x, y):
        return lambda g: (g @ y.T, x.T @ g)

    return apply_op("matmul", np.matmul, vjp_factory, a, b)


def transpose(m) -> Node:
    m = as_node(m)
    return apply_op("transpose", lambda x: x.T.copy(), lambda out, x: lambda g: (g.T,), m)


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("add", a, b)

    def vjp_factory(out, x, y):
        return lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape))

    return apply_op("add", np.add, vjp_factory, a, b)


def mul(a, b) -> Node:
    """Elementwise (Hadamard) product with row/scalar broadcasting."""
    a, b = as_node(a), as_node(b)
    _check_broadcast("mul", a, b)

    def vjp_factory(out, x, y):
        return lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape))

    return apply_op("mul", np.multiply, vjp_factory, a, b)


def scale(m, factor: float) -> Node:
    m = as_node(m)
    factor = float(factor)
    return apply_op(
        "scale", lambda x: x * factor, lambda out, x: lambda g: (g * factor,), m
    )


def sum_all(m) -> Node:
    m = as_node(m)
    return apply_op(
        "sum_all",
        lambda x: np.array([[x.sum()]], dtype=DTYPE),
        lambda out, x: lambda g: (np.full_like(x, g[0, 0]),),
        m,
    )


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def row_softmax(m) -> Node:
    """Softmax of every row, with per-row max subtraction."""
    m = as_node(m)
    if not np.all(np.isfinite(m.value)):
        raise NonFiniteError("row_softmax requires finite entries")

    def vjp_factory(out, x):
        return lambda g: (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return apply_op("row_softmax", _softmax_rows, vjp_factory, m)


def affine(x, w, b) -> Node:
    """``x @ w`` plus the row vector ``b`` on every row."""
    x, w, b = as_node(x), as_node(w), as_node(b)
    if x.cols != w.rows:
        raise DimensionError("affine: input width differs from weight rows", [x.shape, w.shape])
    if b.shape != (1, w.cols):
        raise DimensionError("affine: bias must be 1 x output width", [w.shape, b.shape])

    def vjp_factory(out, xv, wv, bv):
        return lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0, keepdims=True))

    return apply_op("affine", lambda xv, wv, bv: xv @ wv + bv, vjp_factory, x, w, b)


def tanh_map(m) -> Node:
    m = as_node(m)
    return apply_op("tanh", np.tanh, lambda out, x: lambda g: (g * (1.0 - out * out),), m)


def sigmoid_map(m) -> Node:
    m = as_node(m)
    return apply_op("sigmoid", expit, lambda out, x: lambda g: (g * out * (1.0 - out),), m)


def concat_cols(parts: Sequence) -> Node:
    """Juxtapose matrices with equal row counts, in list order."""
    nodes = [as_node(p) for p in parts]
    if not nodes:
        raise PreconditionError("concat_cols needs at least one part")
    rows = nodes[0].rows
    if any(n.rows != rows for n in nodes):
        raise DimensionError("concat_cols: row counts differ", [n.shape for n in nodes])
    splits = np.cumsum([n.cols for n in nodes])[:-1]

    def vjp_factory(out, *xs):
        return lambda g: tuple(np.split(g, splits, axis=1))

    return apply_op("concat_cols", lambda *xs: np.concatenate(xs, axis=1), vjp_factory, *nodes)


def mean_rows(m) -> Node:
    """Column means as a 1 x d row."""
    m = as_node(m)
    n = m.rows

    def vjp_factory(out, x):
        return lambda g: (np.repeat(g / n, n, axis=0),)

    return apply_op("mean_rows", lambda x: x.mean(axis=0, keepdims=True), vjp_factory, m)


def take_row(m, index: int) -> Node:
    m = as_node(m)
    if not 0 <= index < m.rows:
        raise DimensionError(f"row {index} out of range", [m.shape])

    def vjp_factory(out, x):
        def vjp(g):
            full = np.zeros_like(x)
            full[index] = g[0]
            return (full,)

        return vjp

    return apply_op("take_row", lambda x: x[index : index + 1].copy(), vjp_factory, m)


def _scalar(forward: Callable[[], Node]) -> float:
    with suspend_tape():
        return forward().item()


def finite_diff_check(
    forward: Callable[[], Node],
    params: Iterable[Parameter],
    eps: float = 1e-5,
) -> Dict[str, float]:
    """Compare tape gradients with central differences.

    Returns the maximum relative error per parameter name, where the error of
    one entry is ``|g_tape - g_fd| / max(1e-8, |g_tape| + |g_fd|)``.
    """
    if not eps > 0:
        raise PreconditionError(f"eps must be positive, got {eps!r}")
    params = list(params)
    for param in params:
        param.zero_grad()

    with Tape() as tape:
        loss = forward()
    tape.backward(loss)

    baseline = _scalar(forward)
    if baseline != _scalar(forward):
        raise DeterminismError("forward pass is not deterministic")
    if tape.replay(loss)[0, 0] != loss.item():
        raise DeterminismError("tape replay does not reproduce the loss")

    errors: Dict[str, float] = {}
    for param in params:
        worst = 0.0
        for idx in np.ndindex(*param.shape):
            original = param.value[idx]
            param.value[idx] = original + eps
            f_plus = _scalar(forward)
            param.value[idx] = original - eps
            f_minus = _scalar(forward)
            param.value[idx] = original
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            g_tape = param.grad[idx]
            rel = abs(g_tape - g_fd) / max(1e-8, abs(g_tape) + abs(g_fd))
            worst = max(worst, float(rel))
        errors[param.name] = worst
        logger.debug(f"gradcheck {param.name}: max relative error {worst:.3e}")
    return errors

