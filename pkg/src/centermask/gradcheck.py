"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """d fn() / d x by central differences, perturbing ``x.data`` in place."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(fn().data.sum())
        flat[i] = orig - eps
        fm = float(fn().data.sum())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> list[float]:
    """Relative errors between tape and finite-difference gradients, one per input.

    ``fn`` must rebuild the graph from ``inputs`` on every call and return a
    scalar tensor. Inputs should be float64.
    """
    for x in inputs:
        x.grad = None
        x.requires_grad = True
    fn().backward()
    tape = [x.grad.copy() if x.grad is not None else np.zeros_like(x.data) for x in inputs]
    return [relative_error(t, numerical_grad(fn, x, eps)) for t, x in zip(tape, inputs)]
