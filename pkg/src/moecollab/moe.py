"""Combining heterogeneous experts: zero padding, gate-weighted sum, routing analytics."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .encoder import Encoder, TokenBatch, encode, encode_backward
from .exceptions import ShapeError, UndefinedEntropyError, ValidationError
from .expert import ExpertModule, ExpertTrace, expert_backward, expert_forward
from .gating import GatingNetwork, gate_backward, gate_forward
from .ndmath import softmax_rows_backward


@dataclass
class MoEModel:
    encoder: Encoder
    experts: list[ExpertModule]
    gating: GatingNetwork
    label_names: list[str] | None = None

    def __post_init__(self):
        if not self.experts:
            raise ValidationError("a mixture needs at least one expert")
        if self.gating.num_experts != len(self.experts):
            raise ShapeError(
                f"gating routes to {self.gating.num_experts} experts but {len(self.experts)} are given")
        d = self.encoder.hidden_dim
        bad = [i for i, e in enumerate(self.experts) if e.hidden_dim != d]
        if bad or self.gating.hidden_dim != d:
            raise ShapeError(f"experts {bad} / gating disagree with encoder hidden_dim {d}")
        if self.label_names is not None and len(self.label_names) != self.num_classes:
            raise ValidationError(
                f"label universe has {len(self.label_names)} names but c_max is {self.num_classes}")

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def num_classes(self) -> int:
        return max(e.num_classes for e in self.experts)


@dataclass
class CombinedOutput:
    logits: np.ndarray
    gate_weights: np.ndarray
    per_expert_logits: list[np.ndarray]
    h: np.ndarray = field(repr=False, default=None)
    traces: list[ExpertTrace] = field(repr=False, default_factory=list)
    batch: TokenBatch | None = field(repr=False, default=None)


def pad_outputs(outputs: list[np.ndarray], c_max: int | None = None) -> list[np.ndarray]:
    """Right-pad each ``(b, c_i)`` block with zero columns to ``c_max`` columns."""
    if not outputs:
        raise ShapeError("no expert outputs to pad")
    sizes = {o.shape[0] for o in outputs}
    if len(sizes) != 1:
        raise ShapeError(f"expert outputs disagree on batch size: {sorted(sizes)}")
    widest = max(o.shape[1] for o in outputs)
    c_max = widest if c_max is None else c_max
    if c_max < widest:
        raise ShapeError(f"c_max {c_max} is narrower than an expert output ({widest})")
    padded = []
    for o in outputs:
        if o.shape[1] < c_max:
            padded.append(np.concatenate([o, np.zeros((o.shape[0], c_max - o.shape[1]))], axis=1))
        else:
            padded.append(o)
    return padded


def combine(weights: np.ndarray, padded: list[np.ndarray]) -> np.ndarray:
    stacked = np.stack(padded, axis=1)  # (b, E, c_max)
    return np.einsum("be,bec->bc", weights, stacked)


def combine_hidden(h: np.ndarray, m: MoEModel, weights: np.ndarray | None = None) -> CombinedOutput:
    """Everything after the encoder: gate, experts, padding and the weighted sum."""
    if weights is None:
        weights = gate_forward(h, m.gating)
    traces = [expert_forward(h, e) for e in m.experts]
    outs = [t.y for t in traces]
    logits = combine(weights, pad_outputs(outs, m.num_classes))
    return CombinedOutput(logits, weights, outs, h, traces)


def moe_forward(batch: TokenBatch, m: MoEModel) -> CombinedOutput:
    h = encode(batch, m.encoder)
    out = combine_hidden(h, m)
    out.batch = batch
    return out


def moe_backward(combined: CombinedOutput, m: MoEModel, grad_logits: np.ndarray,
                 grad_weights: np.ndarray | None = None, train_gate: bool = True,
                 train_experts: bool = False, train_encoder: bool = False) -> np.ndarray:
    """Back-propagate through the weighted sum.

    ``grad_weights`` is an extra gradient on the gate weights (the routing
    regularizers). Gate parameters always receive gradient when ``train_gate``;
    experts and the encoder only when asked. Returns the gradient on the pooled
    encoder output.
    """
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    if grad_logits.shape != combined.logits.shape:
        raise ShapeError(f"grad_logits shape {grad_logits.shape} != logits {combined.logits.shape}")
    w = combined.gate_weights
    g_w = np.empty_like(w)
    grad_h = np.zeros_like(combined.h)
    for i, (e, trace) in enumerate(zip(m.experts, combined.traces)):
        ci = e.num_classes
        # padded columns are constants: only the first ci columns reach the expert
        g_w[:, i] = np.sum(grad_logits[:, :ci] * trace.y, axis=1)
        g_y = grad_logits[:, :ci] * w[:, i:i + 1]
        grad_h += expert_backward(trace, e, g_y, train_adapter=train_experts, train_head=train_experts)
    if grad_weights is not None:
        if grad_weights.shape != w.shape:
            raise ShapeError(f"grad_weights shape {grad_weights.shape} != gate weights {w.shape}")
        g_w = g_w + grad_weights
    if train_gate:
        grad_h += gate_backward(combined.h, w, m.gating, g_w)
    else:
        grad_h += softmax_rows_backward(w, g_w) @ m.gating.W_g.value.T
    if train_encoder:
        if combined.batch is None:
            raise ValidationError("encoder gradients need the forward TokenBatch")
        encode_backward(combined.batch, m.encoder, grad_h)
    return grad_h


# ---------------------------------------------------------------- routing analytics


@dataclass
class RoutingStats:
    domain_names: list[str]
    num_experts: int
    weight_mass: np.ndarray = None      # (E, D)
    argmax_counts: np.ndarray = None    # (E, D)
    example_count: np.ndarray = None    # (D,)

    def __post_init__(self):
        e, d = self.num_experts, len(self.domain_names)
        if e < 1 or d < 1:
            raise ValidationError("routing stats need at least one expert and one domain")
        if self.weight_mass is None:
            self.weight_mass = np.zeros((e, d))
        if self.argmax_counts is None:
            self.argmax_counts = np.zeros((e, d))
        if self.example_count is None:
            self.example_count = np.zeros(d)

    @property
    def num_domains(self) -> int:
        return len(self.domain_names)

    def copy(self) -> "RoutingStats":
        return RoutingStats(list(self.domain_names), self.num_experts, self.weight_mass.copy(),
                            self.argmax_counts.copy(), self.example_count.copy())

    def merge(self, other: "RoutingStats") -> "RoutingStats":
        if other.domain_names != self.domain_names or other.num_experts != self.num_experts:
            raise ValidationError("cannot merge routing stats over different experts/domains")
        return RoutingStats(list(self.domain_names), self.num_experts,
                            self.weight_mass + other.weight_mass,
                            self.argmax_counts + other.argmax_counts,
                            self.example_count + other.example_count)

    def to_dict(self) -> dict:
        return {"domain_names": list(self.domain_names), "num_experts": self.num_experts,
                "weight_mass": self.weight_mass.tolist(),
                "argmax_counts": self.argmax_counts.tolist(),
                "example_count": self.example_count.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RoutingStats":
        return cls(list(d["domain_names"]), int(d["num_experts"]),
                   np.asarray(d["weight_mass"], float), np.asarray(d["argmax_counts"], float),
                   np.asarray(d["example_count"], float))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["expert", *self.domain_names])
        for e in range(self.num_experts):
            w.writerow([e, *(repr(float(v)) for v in self.weight_mass[e])])
        return buf.getvalue()

    def summary(self) -> dict:
        ent = []
        for e in range(self.num_experts):
            try:
                ent.append(routing_entropy(self, e))
            except UndefinedEntropyError:
                ent.append(None)
        return {"utilization": utilization(self).tolist(), "routing_entropy": ent}

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2)


def accumulate_routing(stats: RoutingStats, weights: np.ndarray, domains) -> RoutingStats:
    """Add each row's gate weights to its domain column. Mutates and returns ``stats``."""
    domains = np.asarray(domains, dtype=np.int64).reshape(-1)
    if weights.shape != (domains.shape[0], stats.num_experts):
        raise ShapeError(f"weights shape {weights.shape} does not match "
                         f"({domains.shape[0]}, {stats.num_experts})")
    bad = np.flatnonzero((domains < 0) | (domains >= stats.num_domains))
    if bad.size:
        raise ValidationError(f"row {int(bad[0])}: unknown domain id {int(domains[bad[0]])}")
    mass = np.zeros((stats.num_domains, stats.num_experts))
    np.add.at(mass, domains, weights)
    stats.weight_mass += mass.T
    top = np.argmax(weights, axis=1)
    np.add.at(stats.argmax_counts, (top, domains), 1.0)
    stats.example_count += np.bincount(domains, minlength=stats.num_domains)
    return stats


def routing_entropy(stats: RoutingStats, expert: int) -> float:
    """Entropy (nats) of the domain distribution of the gate mass an expert received."""
    row = stats.weight_mass[expert]
    total = row.sum()
    if not total > 0:
        raise UndefinedEntropyError(f"expert {expert} received no gate mass")
    p = row / total
    p = p[p > 0]
    return float(max(0.0, -np.sum(p * np.log(p))))


def dominant_expert(stats: RoutingStats, domain: int) -> int:
    return int(np.argmax(stats.weight_mass[:, domain]))


def utilization(stats: RoutingStats) -> np.ndarray:
    total = stats.weight_mass.sum()
    if not total > 0:
        raise ValidationError("routing stats are empty")
    return stats.weight_mass.sum(axis=1) / total


def max_routing_entropy(stats: RoutingStats) -> float:
    return math.log(stats.num_domains)
