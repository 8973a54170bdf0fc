"""Dense tensors with a small reverse-mode differentiation engine.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients.
Calling :meth:`Tensor.backward` on a scalar walks that graph once in reverse
topological order.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_state = threading.local()


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an API precondition is violated."""


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    _state.dtype = np.dtype(dtype)


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the floating dtype used for new tensors."""
    prev = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


def debug_checks() -> bool:
    return getattr(_state, "debug", False)


@contextlib.contextmanager
def debug_mode(enabled: bool = True) -> Iterator[None]:
    """Check every forward output for NaN/Inf while active."""
    prev = debug_checks()
    _state.debug = enabled
    try:
        yield
    finally:
        _state.debug = prev


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or default_dtype())
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.op = "leaf"

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        needs = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        if debug_checks() and not np.all(np.isfinite(data)):
            bad = [p for p in parents if not np.all(np.isfinite(p.data))]
            if not bad:
                raise FloatingPointError(f"non-finite output from op '{op}' with finite inputs")
        return out

    # -- basic properties -------------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff -----------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that does not require grad")

        order = topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return ops.mul(self, 1.0 / other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __pow__(self, exponent: float):
        from . import ops
        return ops.power(self, exponent)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis)

    def mean(self, axis=None):
        from . import ops
        return ops.mean(self, axis)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every parent before its children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)

