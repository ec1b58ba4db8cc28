"""Softmax gating network and the entropy-regularized routing objective.

The objective is ``task + lambda1 * mean_entropy + lambda2 * balance_kl`` where
``mean_entropy`` is the per-example gate entropy averaged over the batch and
``balance_kl`` is KL(batch-mean gate || uniform). With ``lambda1 > 0`` the
entropy term sharpens individual routes; the KL term spreads load. Either
coefficient may be negative to flip its pressure.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import NumericError, ShapeError, ValidationError
from .ndmath import Param, linear, linear_backward, softmax_rows, softmax_rows_backward

SIMPLEX_TOL = 1e-6


@dataclass
class GatingNetwork:
    W_g: Param
    b_g: Param

    def __post_init__(self):
        d, e = self.W_g.shape
        if self.b_g.shape != (1, e):
            raise ShapeError(f"b_g: expected (1, {e}), got {self.b_g.shape}")

    @property
    def hidden_dim(self) -> int:
        return self.W_g.shape[0]

    @property
    def num_experts(self) -> int:
        return self.W_g.shape[1]

    def parameters(self) -> list[Param]:
        return [self.W_g, self.b_g]

    def zero_grad(self) -> None:
        self.W_g.zero_grad()
        self.b_g.zero_grad()


@dataclass(frozen=True)
class GateLossConfig:
    lambda1: float = 0.01
    lambda2: float = 0.1

    def __post_init__(self):
        if not (math.isfinite(self.lambda1) and math.isfinite(self.lambda2)):
            raise ValidationError("lambda1 and lambda2 must be finite")


@dataclass
class LossBreakdown:
    task: float
    mean_entropy: float
    balance_kl: float
    total: float
    # gradient of (lambda1 * mean_entropy + lambda2 * balance_kl) w.r.t. the gate weights
    grad_weights: np.ndarray | None = None

    def as_dict(self) -> dict:
        return {"task": self.task, "mean_entropy": self.mean_entropy,
                "balance_kl": self.balance_kl, "total": self.total}


def init_gating(d: int, num_experts: int, seed: int = 0, scale: float = 0.01) -> GatingNetwork:
    if d < 1 or num_experts < 1:
        raise ValidationError(f"invalid gating dimensions d={d}, E={num_experts}")
    rng = np.random.default_rng(seed)
    return GatingNetwork(Param(rng.normal(0.0, scale, (d, num_experts))),
                         Param(np.zeros((1, num_experts))))


def gate_logits(h: np.ndarray, gn: GatingNetwork) -> np.ndarray:
    if h.ndim != 2 or h.shape[1] != gn.hidden_dim:
        raise ShapeError(f"gating expects (b, {gn.hidden_dim}) input, got {h.shape}")
    return linear(h, gn.W_g, gn.b_g)


def gate_forward(h: np.ndarray, gn: GatingNetwork) -> np.ndarray:
    return softmax_rows(gate_logits(h, gn))


def gate_backward(h: np.ndarray, weights: np.ndarray, gn: GatingNetwork,
                  grad_weights: np.ndarray) -> np.ndarray:
    """Back-propagate a gradient on the gate weights into ``gn``; return the gradient on ``h``."""
    g_logits = softmax_rows_backward(weights, grad_weights)
    return linear_backward(h, gn.W_g, gn.b_g, g_logits)


def _check_simplex(weights: np.ndarray) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeError(f"gate weights must be 2-D, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise NumericError("gate weights contain non-finite values")
    if np.any(w < -SIMPLEX_TOL) or np.any(np.abs(w.sum(axis=1) - 1.0) > SIMPLEX_TOL):
        raise ValidationError("gate weight rows are not on the probability simplex")
    return np.clip(w, 0.0, None)


def _xlogx(p):
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = p[pos] * np.log(p[pos])
    return out


def mean_gate_entropy(weights: np.ndarray) -> float:
    w = _check_simplex(weights)
    return float(-_xlogx(w).sum() / w.shape[0])


def balance_kl(weights: np.ndarray) -> float:
    w = _check_simplex(weights)
    p_bar = w.mean(axis=0)
    return float(_xlogx(p_bar).sum() + math.log(w.shape[1]) * p_bar.sum())


def _regularizer_grads(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b, e = w.shape
    # d/dg of 0*log 0 is unbounded; boundary entries get the finite limit from a tiny floor
    logw = np.log(np.maximum(w, 1e-300))
    g_ent = -(logw + 1.0) / b
    p_bar = w.mean(axis=0)
    g_kl = np.broadcast_to((np.log(np.maximum(p_bar, 1e-300) * e) + 1.0) / b, w.shape).copy()
    return g_ent, g_kl


def gate_loss(task: float, weights: np.ndarray, cfg: GateLossConfig) -> LossBreakdown:
    if not math.isfinite(task):
        raise NumericError(f"task loss is not finite: {task}")
    w = _check_simplex(weights)
    ent = mean_gate_entropy(w)
    kl = balance_kl(w)
    total = task + cfg.lambda1 * ent + cfg.lambda2 * kl
    g_ent, g_kl = _regularizer_grads(w)
    return LossBreakdown(task, ent, kl, total, cfg.lambda1 * g_ent + cfg.lambda2 * g_kl)
