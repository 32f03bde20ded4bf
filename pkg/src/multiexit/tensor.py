"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable operation returns a
new tensor that remembers its parents and a closure computing the parents'
gradients, so the executed operations form a DAG. :meth:`Tensor.backward`
orders that DAG topologically and visits each node once, in reverse.

Storage is float32 by default. Operations keep the dtype of their inputs, which
lets the gradient checker re-run a graph in float64 by swapping the data of the
leaf tensors.
"""

from __future__ import annotations

import contextlib
from collections import Counter
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

DEFAULT_DTYPE = np.float32

ArrayLike = Union[np.ndarray, float, int, Sequence]

_grad_enabled = True
_scope_stack: list[str] = []
_op_counter: Optional[Counter] = None


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf from its inputs."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def op_scope(name: str) -> Iterator[None]:
    """Label every operation executed inside the block with ``name``.

    Scopes nest; the innermost label wins. Labels only matter while a
    :func:`count_ops` block is active.
    """
    _scope_stack.append(name)
    try:
        yield
    finally:
        _scope_stack.pop()


@contextlib.contextmanager
def count_ops() -> Iterator[Counter]:
    """Count executed operations per scope label.

    Example:
        >>> with count_ops() as counts:
        ...     model.forward_to_exit(x, 1)
        >>> counts["stage2"]
        0
    """
    global _op_counter
    prev = _op_counter
    counts: Counter = Counter()
    _op_counter = counts
    try:
        yield counts
    finally:
        _op_counter = prev


def _record_op() -> None:
    if _op_counter is not None:
        _op_counter[_scope_stack[-1] if _scope_stack else ""] += 1


def _as_array(data: ArrayLike, dtype=None) -> np.ndarray:
    if isinstance(data, np.ndarray):
        if dtype is not None and data.dtype != dtype:
            return data.astype(dtype)
        if dtype is None and not np.issubdtype(data.dtype, np.floating):
            return data.astype(DEFAULT_DTYPE)
        return data
    return np.asarray(data, dtype=dtype or DEFAULT_DTYPE)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded to reach it."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the autodiff graph.

    Attributes:
        data: the forward value.
        requires_grad: whether gradients flow to (or through) this tensor.
        grad: accumulated gradient for leaf tensors, same shape as ``data``.
    """

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None,
                 name: str = ""):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    # -- construction -----------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"],
                 backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> "Tensor":
        _record_op()
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("operation produced non-finite values")
        out = cls(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- properties -------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward ---------------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Without an explicit seed gradient the tensor must be a scalar.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g.astype(node.data.dtype, copy=False)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return add(self, -_wrap(other, self.dtype))

    def __rsub__(self, other) -> "Tensor":
        return add(_wrap(other, self.dtype), -self)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        raise TypeError("division is only supported by python scalars")

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def tensor(data: ArrayLike, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)


# -- elementary differentiable ops --------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data + b.data, (a, b),
                           lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b),
                           lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,))


def channel_mul(x: Tensor, gate: Tensor) -> Tensor:
    """Multiply each (sample, channel) plane of an NCHW tensor by ``gate[n, c]``."""
    if gate.shape != x.shape[:2]:
        raise ValueError(f"gate shape {gate.shape} does not match N,C of input {x.shape}")
    return mul(x, reshape(gate, gate.shape + (1, 1)))


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    old = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor._from_op(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                           lambda g: (np.broadcast_to(g, shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return Tensor._from_op(np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                           lambda g: (np.broadcast_to(g / n, shape).astype(a.dtype),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,),
                           lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = (1.0 / (1.0 + np.exp(-x.data))).astype(x.dtype, copy=False)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1 - out),))


def stack_mean(tensors: Sequence[Tensor], weights: Optional[Sequence[float]] = None) -> Tensor:
    """Weighted sum of same-shape tensors (uniform mean when no weights)."""
    if weights is None:
        weights = [1.0 / len(tensors)] * len(tensors)
    out = scale(tensors[0], float(weights[0]))
    for t, w in zip(tensors[1:], weights[1:]):
        out = add(out, scale(t, float(w)))
    return out
