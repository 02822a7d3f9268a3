"""Dense float64 tensors with reverse-mode automatic differentiation.

A dynamic tape: every operation on tensors that require gradients records
its inputs and a vector-Jacobian closure on the output tensor.  Calling
:func:`backward` on a scalar root walks the tape in reverse topological
order exactly once and accumulates gradients into every reachable leaf.

Everything is float64 and numpy-backed.  Broadcasting follows numpy's
trailing-dimension rule; anything numpy rejects is reported as a
:class:`DimensionError`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NumericalError

ArrayLike = Union["Tensor", np.ndarray, float, int, list]

_grad_enabled = True


class no_grad:
    """Context manager that suspends tape recording.

    Operations performed inside produce constant tensors with no parents,
    which keeps generation / prediction passes off the optimizer's graph.
    """

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A numpy float64 array plus optional gradient tape bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------
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

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap an op result, recording tape links only when needed."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- binary elementwise ops ---------------------------------------------


def _broadcast_op(a: Tensor, b: Tensor, fn, name: str) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(
            f"{name}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from exc


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _broadcast_op(a, b, np.add, "add")
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _broadcast_op(a, b, np.subtract, "sub")
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _broadcast_op(a, b, np.multiply, "mul")
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _broadcast_op(a, b, np.divide, "div")
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _make(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# -- unary elementwise ops ------------------------------------------------


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.size and np.min(a.data) <= 0.0:
        raise DomainError("log requires strictly positive inputs")
    out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,))


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.size and np.min(a.data) < 0.0:
        raise DomainError("sqrt requires nonnegative inputs")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / np.maximum(out, 1e-300),))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (g * 2.0 * a.data,))


def absolute(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.where(
            a.data >= 0,
            1.0 / (1.0 + np.exp(-a.data)),
            np.exp(a.data) / (1.0 + np.exp(a.data)),
        )
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: (g * (a.data > 0.0),))


def elu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.where(a.data > 0.0, a.data, np.expm1(a.data))
    return _make(out, (a,), lambda g: (g * np.where(a.data > 0.0, 1.0, out + 1.0),))


def softplus(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    with np.errstate(over="ignore"):
        sig = np.where(
            a.data >= 0,
            1.0 / (1.0 + np.exp(-a.data)),
            np.exp(a.data) / (1.0 + np.exp(a.data)),
        )
    return _make(out, (a,), lambda g: (g * sig,))


def clamp(a: ArrayLike, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient passes through inside the range."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(out, (a,), lambda g: (g * mask,))


# -- reductions, shape ops ------------------------------------------------


def _check_axis(a: Tensor, axis):
    if axis is not None and not (-a.ndim <= axis < a.ndim):
        raise DimensionError(f"axis {axis} out of range for rank-{a.ndim} tensor")


def reduce_sum(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    _check_axis(a, axis)
    out = np.sum(a.data, axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(out, (a,), vjp)


def reduce_mean(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    _check_axis(a, axis)
    out = np.mean(a.data, axis=axis)
    count = a.size if axis is None else a.shape[axis]

    def vjp(g):
        scaled = g / count
        if axis is None:
            return (np.broadcast_to(scaled, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(scaled, axis), a.shape).copy(),)

    return _make(out, (a,), vjp)


def reshape(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def take(a: ArrayLike, key) -> Tensor:
    """Numpy-style indexing; backward scatter-adds (duplicates accumulate)."""
    a = as_tensor(a)
    try:
        out = a.data[key]
    except IndexError as exc:
        raise DimensionError(f"index {key!r} invalid for shape {a.shape}") from exc

    def vjp(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, key, g)
        return (buf,)

    return _make(np.array(out, dtype=np.float64, copy=True), (a,), vjp)


def logsumexp(a: ArrayLike, axis: int) -> Tensor:
    """log(sum(exp(a), axis)) via the max-shift identity.

    The shift is a constant, so gradients are exactly the softmax weights.
    """
    a = as_tensor(a)
    _check_axis(a, axis)
    shift = np.max(a.data, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    shifted = sub(a, Tensor(shift))
    summed = reduce_sum(exp(shifted), axis=axis)
    return add(log(summed), Tensor(np.squeeze(shift, axis=axis)))


def concat_scalars(parts: Iterable[Tensor]) -> Tensor:
    """Sum a list of scalar tensors (empty list gives the constant 0)."""
    total: Optional[Tensor] = None
    for part in parts:
        total = part if total is None else add(total, part)
    return total if total is not None else Tensor(0.0)


# -- backward pass --------------------------------------------------------


def backward(root: Tensor) -> None:
    """Reverse-mode sweep from a scalar root.

    Accumulates into ``.grad`` of every tensor with ``requires_grad``;
    leaves the root's own grad at 1.  Each tape node is visited once.
    """
    if root.size != 1:
        raise ContractError(f"backward requires a scalar root, got shape {root.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._vjp is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += _unbroadcast(np.asarray(g), parent.shape)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: int
    worst_coord: int
    n_coords: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    builder: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central finite differences.

    ``builder`` must rebuild the scalar loss from the current contents of
    ``params`` and be deterministic (fix any sampling noise outside it).
    Relative error per coordinate is |ad - fd| / max(1, |ad|, |fd|).
    """
    if not (0.0 < epsilon <= 1e-2):
        raise ContractError(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    for i, p in enumerate(params):
        if not np.all(np.isfinite(p.data)):
            raise ContractError(f"parameter {i} contains non-finite values")

    zero_grads(params)
    loss = builder()
    backward(loss)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    max_rel = 0.0
    worst = (0, 0)
    n_coords = 0
    for i, p in enumerate(params):
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            n_coords += 1
            saved = flat[j]
            flat[j] = saved + epsilon
            with no_grad():
                f_plus = builder().item()
            flat[j] = saved - epsilon
            with no_grad():
                f_minus = builder().item()
            flat[j] = saved
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericalError(
                    f"non-finite loss while perturbing parameter {i}, coordinate {j}"
                )
            fd = (f_plus - f_minus) / (2.0 * epsilon)
            ad = analytic[i].reshape(-1)[j]
            rel = abs(ad - fd) / max(1.0, abs(ad), abs(fd))
            if rel > max_rel:
                max_rel = rel
                worst = (i, j)
    return GradCheckReport(max_rel, worst[0], worst[1], n_coords, tolerance)
