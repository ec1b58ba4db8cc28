"""Dense float64 kernels with analytic backward rules.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64; the batch
always lives on the row axis. Biases are stored as ``(1, n)`` rows so that
every parameter is a matrix and serializes uniformly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import LabelError, NumericError, ShapeError

__all__ = [
    "Param",
    "as_tensor2",
    "matmul",
    "relu",
    "relu_backward",
    "softmax_rows",
    "softmax_rows_backward",
    "cross_entropy_logits",
    "linear",
    "linear_backward",
    "zero_grads",
]


def as_tensor2(a, name: str = "tensor") -> np.ndarray:
    """Return ``a`` as a C-contiguous float64 matrix with at least one row and column."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must have rows >= 1 and cols >= 1, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


@dataclass
class Param:
    """A trainable matrix and its accumulated gradient."""

    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = as_tensor2(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def copy(self) -> "Param":
        return Param(self.value.copy(), self.grad.copy())


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}: inner dimensions differ")
    return a @ b


def relu(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0.0)


def relu_backward(pre: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient 0 at the kink
    return grad_out * (pre > 0.0)


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction. Works on any array along its last axis."""
    if not np.all(np.isfinite(a)):
        raise NumericError("softmax_rows received non-finite input")
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(probs: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the softmax input given the softmax output and upstream gradient."""
    inner = np.sum(grad_out * probs, axis=-1, keepdims=True)
    return probs * (grad_out - inner)


def cross_entropy_logits(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over rows and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} logit rows")
    bad = np.flatnonzero((labels < 0) | (labels >= c))
    if bad.size:
        i = int(bad[0])
        raise LabelError(f"row {i}: label {int(labels[i])} outside [0, {c})")
    if not np.all(np.isfinite(logits)):
        raise NumericError("cross_entropy_logits received non-finite logits")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad


def linear(x: np.ndarray, weight: Param, bias: Param) -> np.ndarray:
    return matmul(x, weight.value) + bias.value


def linear_backward(x: np.ndarray, weight: Param, bias: Param, grad_out: np.ndarray,
                    accumulate: bool = True) -> np.ndarray:
    """Accumulate weight/bias gradients of ``x @ W + b`` and return the input gradient."""
    if accumulate:
        weight.grad += x.T @ grad_out
        bias.grad += grad_out.sum(axis=0, keepdims=True)
    return grad_out @ weight.value.T
