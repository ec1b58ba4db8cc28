"""Adapter expert: a residual bottleneck on the pooled vector plus a linear head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ShapeError, ValidationError
from .ndmath import Param, linear, linear_backward, relu, relu_backward

PARAM_NAMES = ("W_down", "b_down", "W_up", "b_up", "W_out", "b_out")
ADAPTER_PARAMS = ("W_down", "b_down", "W_up", "b_up")
HEAD_PARAMS = ("W_out", "b_out")


@dataclass
class ExpertModule:
    W_down: Param
    b_down: Param
    W_up: Param
    b_up: Param
    W_out: Param
    b_out: Param
    domain_tag: str = ""

    def __post_init__(self):
        d, k = self.W_down.shape
        c = self.W_out.shape[1]
        if k < 1:
            raise ValidationError("adapter_dim must be >= 1")
        if c < 2:
            raise ValidationError(f"num_classes must be >= 2, got {c}")
        expected = {"W_down": (d, k), "b_down": (1, k), "W_up": (k, d), "b_up": (1, d),
                    "W_out": (d, c), "b_out": (1, c)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {getattr(self, name).shape}")

    @property
    def hidden_dim(self) -> int:
        return self.W_down.shape[0]

    @property
    def adapter_dim(self) -> int:
        return self.W_down.shape[1]

    @property
    def num_classes(self) -> int:
        return self.W_out.shape[1]

    def named_params(self, names=PARAM_NAMES) -> dict[str, Param]:
        return {n: getattr(self, n) for n in names}

    def parameters(self, names=PARAM_NAMES) -> list[Param]:
        return [getattr(self, n) for n in names]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


@dataclass
class ExpertTrace:
    h: np.ndarray
    a_pre: np.ndarray
    a: np.ndarray
    h_prime: np.ndarray
    y: np.ndarray


def init_expert(d: int, k: int, c: int, seed: int = 0, domain_tag: str = "") -> ExpertModule:
    """Glorot-uniform down/out projections; zero up-projection so the adapter starts as identity."""
    if min(d, k) < 1 or c < 2:
        raise ValidationError(f"invalid expert dimensions d={d}, k={k}, c={c}")
    rng = np.random.default_rng(seed)

    def glorot(n_in, n_out):
        lim = np.sqrt(6.0 / (n_in + n_out))
        return Param(rng.uniform(-lim, lim, (n_in, n_out)))

    return ExpertModule(
        W_down=glorot(d, k), b_down=Param(np.zeros((1, k))),
        W_up=Param(np.zeros((k, d))), b_up=Param(np.zeros((1, d))),
        W_out=glorot(d, c), b_out=Param(np.zeros((1, c))),
        domain_tag=domain_tag,
    )


def expert_forward(h: np.ndarray, e: ExpertModule) -> ExpertTrace:
    if h.ndim != 2 or h.shape[1] != e.hidden_dim:
        raise ShapeError(f"expert expects (b, {e.hidden_dim}) input, got {h.shape}")
    a_pre = linear(h, e.W_down, e.b_down)
    a = relu(a_pre)
    h_prime = h + linear(a, e.W_up, e.b_up)
    y = linear(h_prime, e.W_out, e.b_out)
    return ExpertTrace(h, a_pre, a, h_prime, y)


def expert_backward(trace: ExpertTrace, e: ExpertModule, grad_y: np.ndarray,
                    train_adapter: bool = True, train_head: bool = True) -> np.ndarray:
    """Accumulate parameter gradients and return the gradient w.r.t. ``h``."""
    grad_y = np.asarray(grad_y, dtype=np.float64)
    if grad_y.shape != trace.y.shape:
        raise ShapeError(f"grad_y shape {grad_y.shape} != expert output {trace.y.shape}")
    g_hp = linear_backward(trace.h_prime, e.W_out, e.b_out, grad_y, accumulate=train_head)
    g_a = linear_backward(trace.a, e.W_up, e.b_up, g_hp, accumulate=train_adapter)
    g_apre = relu_backward(trace.a_pre, g_a)
    return g_hp + linear_backward(trace.h, e.W_down, e.b_down, g_apre, accumulate=train_adapter)
