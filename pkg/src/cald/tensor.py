"""Dense NCHW tensors with reverse-mode automatic differentiation.

Every op builds its output from numpy arrays and, when gradients are being
recorded, attaches a closure mapping the output gradient to one gradient per
parent.  ``backward`` walks the recorded graph once in reverse topological
order.

Broadcasting is deliberately narrow: an operand may match the other's shape,
be a Python/0-d scalar, or be a per-channel vector (shape ``(C,)`` or
``(1, C, 1, 1)``) applied along axis 1.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

DEFAULT_DTYPE = np.float32

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


def is_grad_enabled() -> bool:
    """Recording is per thread, so concurrent inference never toggles another thread's mode."""
    return getattr(_state, "enabled", True)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _as_tensor(value, dtype=DEFAULT_DTYPE) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- broadcasting helpers -------------------------------------------------

def _broadcast_kind(a: np.ndarray, b: np.ndarray) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0 or b.size == 1 and b.ndim <= 1:
        return "scalar_b"
    if a.ndim == 0 or a.size == 1 and a.ndim <= 1:
        return "scalar_a"
    if a.ndim == 4 and _is_channel_vector(b, a.shape[1]):
        return "channel_b"
    if b.ndim == 4 and _is_channel_vector(a, b.shape[1]):
        return "channel_a"
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _is_channel_vector(v: np.ndarray, channels: int) -> bool:
    return v.shape == (channels,) or v.shape == (1, channels, 1, 1)


def _expand(v: np.ndarray, kind: str, side: str) -> np.ndarray:
    if kind == f"channel_{side}":
        return v.reshape(1, -1, 1, 1)
    return v


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...], kind: str, side: str) -> np.ndarray:
    if kind == "same":
        return grad
    if kind == f"scalar_{side}":
        return np.asarray(grad.sum(dtype=np.float64), dtype=grad.dtype).reshape(shape)
    if kind == f"channel_{side}":
        return grad.sum(axis=(0, 2, 3), dtype=np.float64).astype(grad.dtype).reshape(shape)
    return grad


def _binary(a, b):
    a_t = a if isinstance(a, Tensor) else None
    b_t = b if isinstance(b, Tensor) else None
    dtype = (a_t if a_t is not None else b_t).dtype
    a_t = a_t if a_t is not None else _as_tensor(a, dtype)
    b_t = b_t if b_t is not None else _as_tensor(b, dtype)
    kind = _broadcast_kind(a_t.data, b_t.data)
    return a_t, b_t, kind


# -- elementwise ops ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b, kind = _binary(a, b)
    ad, bd = _expand(a.data, kind, "a"), _expand(b.data, kind, "b")
    out = ad + bd

    def backward(g):
        return _reduce_to(g, a.shape, kind, "a"), _reduce_to(g, b.shape, kind, "b")

    return _make(out.astype(a.dtype, copy=False), (a, b), backward)


def sub(a, b) -> Tensor:
    a, b, kind = _binary(a, b)
    ad, bd = _expand(a.data, kind, "a"), _expand(b.data, kind, "b")
    out = ad - bd

    def backward(g):
        return _reduce_to(g, a.shape, kind, "a"), _reduce_to(-g, b.shape, kind, "b")

    return _make(out.astype(a.dtype, copy=False), (a, b), backward)


def mul(a, b) -> Tensor:
    a, b, kind = _binary(a, b)
    ad, bd = _expand(a.data, kind, "a"), _expand(b.data, kind, "b")
    out = ad * bd

    def backward(g):
        return _reduce_to(g * bd, a.shape, kind, "a"), _reduce_to(g * ad, b.shape, kind, "b")

    return _make(out.astype(a.dtype, copy=False), (a, b), backward)


def div(a, b) -> Tensor:
    a, b, kind = _binary(a, b)
    ad, bd = _expand(a.data, kind, "a"), _expand(b.data, kind, "b")
    out = ad / bd

    def backward(g):
        ga = g / bd
        gb = -g * ad / (bd * bd)
        return _reduce_to(ga, a.shape, kind, "a"), _reduce_to(gb, b.shape, kind, "b")

    return _make(out.astype(a.dtype, copy=False), (a, b), backward)


def _unary(x: Tensor, value: np.ndarray, local_grad: Callable[[], np.ndarray]) -> Tensor:
    def backward(g):
        return (g * local_grad(),)

    return _make(value.astype(x.dtype, copy=False), (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _unary(x, out, lambda: out)


def log(x: Tensor) -> Tensor:
    return _unary(x, np.log(x.data), lambda: 1.0 / x.data)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _unary(x, out, lambda: 0.5 / out)


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _unary(x, np.abs(x.data), lambda: np.sign(x.data))


def square(x: Tensor) -> Tensor:
    return _unary(x, x.data * x.data, lambda: 2.0 * x.data)


def clampmin(x: Tensor, minimum: float) -> Tensor:
    """max(x, minimum); the gradient is zero where the floor is active (and at the kink)."""
    out = np.maximum(x.data, x.dtype.type(minimum))
    return _unary(x, out, lambda: (x.data > minimum).astype(x.dtype))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    positive = x.data >= 0
    out = np.where(positive, x.data, x.data * x.dtype.type(slope))
    # subgradient at 0 is the negative-branch slope for x<0, 1 for x>0; 0 exactly at the kink
    return _unary(
        x, out, lambda: np.where(x.data > 0, 1.0, np.where(x.data < 0, slope, 0.0)).astype(x.dtype)
    )


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data)
    return _unary(x, out, lambda: special.expit(x.data))


def sigmoid(x: Tensor) -> Tensor:
    out = special.expit(x.data)
    return _unary(x, out, lambda: out * (1.0 - out))


def normal_cdf(x: Tensor) -> Tensor:
    """Standard normal CDF Phi(x)."""
    out = special.ndtr(x.data)
    return _unary(x, out, lambda: np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi))


# -- reductions -----------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    total = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make(total, (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    total = np.asarray(x.data.sum(dtype=np.float64) / n, dtype=x.dtype)

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return _make(total, (x,), backward)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """x[:, start:stop]."""
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"channel slice [{start}, {stop}) out of range for {x.shape}")
    out = x.data[:, start:stop]

    def backward(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        full[:, start:stop] = g
        return (full,)

    return _make(np.ascontiguousarray(out), (x,), backward)


# -- graph traversal ------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Back-propagate from a scalar ``loss``.

    Gradients of leaf tensors are stored on ``.grad`` (replacing any previous
    value).  Returns a map ``id(tensor) -> gradient`` covering every leaf that
    was reached plus every tensor in ``params``; unreachable params get zeros.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        for node in reversed(_topological_order(loss)):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None:
                    leaves[id(node)] = node
                    grads[id(node)] = g
                continue
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pid = id(parent)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
    result: dict[int, np.ndarray] = {}
    for pid, node in leaves.items():
        node.grad = np.asarray(grads[pid], dtype=node.dtype).reshape(node.shape)
        result[pid] = node.grad
    for p in params or ():
        if id(p) not in result:
            p.grad = np.zeros(p.shape, dtype=p.dtype)
            result[id(p)] = p.grad
    return result
