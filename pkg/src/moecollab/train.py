"""Optimizers, the staged training procedure, evaluation metrics and gradient checking.

Training runs in three phases over a shared encoder: pretrain the encoder with a
throwaway head, freeze it and fine-tune each expert on its own domain, then
freeze the experts and train only the gate under the regularized objective.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Corpus, Example
from .encoder import Encoder, encode, encode_backward, tokenize_batch
from .exceptions import NumericError, ValidationError
from .expert import ADAPTER_PARAMS, HEAD_PARAMS, ExpertModule, expert_backward, expert_forward
from .gating import GateLossConfig, LossBreakdown, gate_loss
from .moe import MoEModel, RoutingStats, accumulate_routing, combine_hidden, moe_backward
from .ndmath import Param, cross_entropy_logits

ENCODE_CHUNK = 256


# ---------------------------------------------------------------- optimizers


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9  # beta1 for adam
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("adam", "sgd_momentum"):
            raise ValidationError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0 <= self.momentum < 1 and 0 <= self.beta2 < 1):
            raise ValidationError("momentum and betas must lie in [0, 1)")


class Optimizer:
    def __init__(self, params: list[Param], cfg: OptimizerConfig):
        self.params = list(params)
        self.cfg = cfg
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        cfg = self.cfg
        self.t += 1
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p.value
            if cfg.kind == "sgd_momentum":
                m *= cfg.momentum
                m += g
                p.value -= cfg.learning_rate * m
            else:
                m *= cfg.momentum
                m += (1 - cfg.momentum) * g
                v *= cfg.beta2
                v += (1 - cfg.beta2) * g * g
                m_hat = m / (1 - cfg.momentum ** self.t)
                v_hat = v / (1 - cfg.beta2 ** self.t)
                p.value -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)


# ---------------------------------------------------------------- metrics


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.size == 0:
        raise ValidationError("accuracy of an empty prediction set")
    return float(np.mean(preds == labels))


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, np.int64), np.asarray(preds, np.int64)), 1)
    return cm


def macro_f1(preds, labels, num_classes: int) -> float:
    """Unweighted mean of per-class F1 over ``range(num_classes)``; 0/0 counts as 0."""
    cm = confusion_matrix(preds, labels, num_classes)
    tp = np.diag(cm).astype(float)
    denom = cm.sum(axis=0) + cm.sum(axis=1)  # 2tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros(num_classes), where=denom > 0)
    return float(f1.mean())


# ---------------------------------------------------------------- reports


@dataclass
class EpochRecord:
    """Metrics after one epoch.

    ``loss``, ``accuracy``, ``macro_f1``, ``breakdown`` and ``routing`` are
    measured with one full pass over the training set once the epoch's updates
    are done; ``running_loss`` is the mean minibatch loss seen during the epoch.
    """

    epoch: int
    loss: float
    accuracy: float
    macro_f1: float
    running_loss: float = float("nan")
    breakdown: dict | None = None
    routing: dict | None = None
    wall_time: float = 0.0


@dataclass
class TrainReport:
    kind: str
    epochs: list[EpochRecord] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def losses(self) -> list[float]:
        return [r.loss for r in self.epochs]

    def routing_stats(self, epoch_index: int) -> RoutingStats:
        return RoutingStats.from_dict(self.epochs[epoch_index].routing)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "config": self.config, "epochs": [asdict(r) for r in self.epochs]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainReport":
        return cls(d["kind"], [EpochRecord(**r) for r in d["epochs"]], d.get("config", {}))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "task", "mean_entropy", "balance_kl", "accuracy", "macro_f1",
                    "running_loss", "wall_time"])
        for r in self.epochs:
            b = r.breakdown or {}
            w.writerow([r.epoch, r.loss, b.get("task", r.loss), b.get("mean_entropy", ""),
                        b.get("balance_kl", ""), r.accuracy, r.macro_f1, r.running_loss,
                        round(r.wall_time, 6)])
        return buf.getvalue()


def _check_finite(*values) -> None:
    for v in values:
        if not math.isfinite(v):
            raise NumericError(f"training produced a non-finite metric: {v}")


# ---------------------------------------------------------------- helpers


def _as_examples(dataset) -> list[Example]:
    examples = list(dataset.examples if isinstance(dataset, Corpus) else dataset)
    if not examples:
        raise ValidationError("dataset is empty")
    return examples


def encode_texts(texts, encoder: Encoder) -> np.ndarray:
    """Pooled representations for many texts, encoded in fixed-size chunks."""
    batch = tokenize_batch(list(texts), encoder.tokenizer)
    if len(batch) == 0:
        return np.zeros((0, encoder.hidden_dim))
    return np.concatenate([encode(batch[i:i + ENCODE_CHUNK], encoder)
                           for i in range(0, len(batch), ENCODE_CHUNK)])


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _check_labels(labels: np.ndarray, num_classes: int) -> None:
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        raise ValidationError(
            f"example {int(bad[0])}: label {int(labels[bad[0]])} outside [0, {num_classes})")


def _classifier_record(epoch: int, logits: np.ndarray, labels: np.ndarray, num_classes: int,
                       running: float, t0: float, loss: float | None = None) -> EpochRecord:
    if loss is None:
        loss, _ = cross_entropy_logits(logits, labels)
    preds = logits.argmax(axis=1)
    rec = EpochRecord(epoch, float(loss), accuracy(preds, labels),
                      macro_f1(preds, labels, num_classes), running_loss=float(running),
                      wall_time=time.perf_counter() - t0)
    _check_finite(rec.loss, rec.running_loss, rec.accuracy, rec.macro_f1)
    return rec


# ---------------------------------------------------------------- training phases


def pretrain_encoder(dataset, encoder: Encoder, head: ExpertModule, opt: OptimizerConfig,
                     epochs: int, batch_size: int = 16, target: str = "label") -> TrainReport:
    """Train the encoder jointly with a throwaway linear head on mixed-domain data.

    ``target`` picks what the head predicts: ``"label"``, ``"domain"``, or
    ``"joint"`` (one class per (domain, label) pair, needing
    ``num_domains * num_labels`` head outputs).
    """
    examples = _as_examples(dataset)
    labels = np.array([e.label for e in examples])
    domains = np.array([e.domain for e in examples])
    if target == "label":
        y = labels
    elif target == "domain":
        y = domains
    elif target == "joint":
        y = domains * (labels.max() + 1) + labels
    else:
        raise ValidationError(f"unknown pretraining target {target!r}")
    _check_labels(y, head.num_classes)
    batch_all = tokenize_batch([e.text for e in examples], encoder.tokenizer)
    params = encoder.parameters() + head.parameters(HEAD_PARAMS)
    optim = Optimizer(params, opt)
    rng = np.random.default_rng(opt.seed)
    report = TrainReport("pretrain", config={"optimizer": asdict(opt), "epochs": epochs,
                                             "batch_size": batch_size, "target": target})
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        running = 0.0
        for idx in _batches(len(examples), batch_size, rng):
            optim.zero_grad()
            batch = batch_all[idx]
            h = encode(batch, encoder)
            trace = expert_forward(h, head)
            loss, g = cross_entropy_logits(trace.y, y[idx])
            g_h = expert_backward(trace, head, g, train_adapter=False)
            encode_backward(batch, encoder, g_h)
            optim.step()
            running += loss * len(idx)
        h_all = np.concatenate([encode(batch_all[i:i + ENCODE_CHUNK], encoder)
                                for i in range(0, len(examples), ENCODE_CHUNK)])
        rec = _classifier_record(epoch, expert_forward(h_all, head).y, y, head.num_classes,
                                 running / len(examples), t0)
        report.epochs.append(rec)
    return report


def train_expert(dataset, expert: ExpertModule, encoder: Encoder, opt: OptimizerConfig,
                 epochs: int, batch_size: int = 16, train_adapter: bool = True) -> TrainReport:
    """Fine-tune one expert with cross-entropy on a frozen encoder.

    With ``train_adapter=False`` only the output head moves, which gives the
    no-adapter baseline.
    """
    examples = _as_examples(dataset)
    labels = np.array([e.label for e in examples])
    _check_labels(labels, expert.num_classes)
    h_all = encode_texts([e.text for e in examples], encoder)
    names = (ADAPTER_PARAMS + HEAD_PARAMS) if train_adapter else HEAD_PARAMS
    optim = Optimizer(expert.parameters(names), opt)
    rng = np.random.default_rng(opt.seed)
    report = TrainReport("expert", config={"optimizer": asdict(opt), "epochs": epochs,
                                           "batch_size": batch_size, "train_adapter": train_adapter,
                                           "domain_tag": expert.domain_tag})
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        running = 0.0
        for idx in _batches(len(examples), batch_size, rng):
            optim.zero_grad()
            trace = expert_forward(h_all[idx], expert)
            loss, g = cross_entropy_logits(trace.y, labels[idx])
            expert_backward(trace, expert, g, train_adapter=train_adapter)
            optim.step()
            running += loss * len(idx)
        rec = _classifier_record(epoch, expert_forward(h_all, expert).y, labels, expert.num_classes,
                                 running / len(examples), t0)
        report.epochs.append(rec)
    return report


def train_gating(dataset, moe: MoEModel, cfg: GateLossConfig, opt: OptimizerConfig, epochs: int,
                 batch_size: int = 16, domain_names: list[str] | None = None) -> TrainReport:
    """Train only the gate under task loss plus the two routing regularizers.

    Experts and encoder stay bit-identical. After each epoch the full objective,
    its breakdown and a ``RoutingStats`` snapshot are measured on the whole
    training set.
    """
    examples = _as_examples(dataset)
    if domain_names is None:
        domain_names = (dataset.domain_names if isinstance(dataset, Corpus)
                        else [str(i) for i in range(max(e.domain for e in examples) + 1)])
    labels = np.array([e.label for e in examples])
    domains = np.array([e.domain for e in examples])
    _check_labels(labels, moe.num_classes)
    h_all = encode_texts([e.text for e in examples], moe.encoder)
    optim = Optimizer(moe.gating.parameters(), opt)
    rng = np.random.default_rng(opt.seed)
    report = TrainReport("gating", config={"optimizer": asdict(opt), "epochs": epochs,
                                           "batch_size": batch_size, "lambda1": cfg.lambda1,
                                           "lambda2": cfg.lambda2,
                                           "domain_names": list(domain_names)})
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        running = 0.0
        for idx in _batches(len(examples), batch_size, rng):
            optim.zero_grad()
            out = combine_hidden(h_all[idx], moe)
            task, g = cross_entropy_logits(out.logits, labels[idx])
            br = gate_loss(task, out.gate_weights, cfg)
            moe_backward(out, moe, g, grad_weights=br.grad_weights, train_gate=True)
            optim.step()
            running += br.total * len(idx)
        out = combine_hidden(h_all, moe)
        task, _ = cross_entropy_logits(out.logits, labels)
        br = gate_loss(task, out.gate_weights, cfg)
        stats = accumulate_routing(RoutingStats(list(domain_names), moe.num_experts),
                                   out.gate_weights, domains)
        rec = _classifier_record(epoch, out.logits, labels, moe.num_classes,
                                 running / len(examples), t0, loss=br.total)
        rec.breakdown = {"task": br.task, "mean_entropy": br.mean_entropy,
                         "balance_kl": br.balance_kl, "total": br.total}
        rec.routing = stats.to_dict()
        _check_finite(br.mean_entropy, br.balance_kl)
        report.epochs.append(rec)
    return report


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    accuracy: float
    macro_f1: float
    num_examples: int
    routing: RoutingStats | None = None
    gate_breakdown: LossBreakdown | None = None

    def to_dict(self) -> dict:
        d = {"accuracy": self.accuracy, "macro_f1": self.macro_f1, "num_examples": self.num_examples}
        if self.routing is not None:
            d.update(self.routing.summary())
        return d


def predict_logits(texts, model, encoder: Encoder | None = None) -> tuple[np.ndarray, np.ndarray | None]:
    """Logits (and gate weights for a mixture) for raw texts."""
    if isinstance(model, MoEModel):
        out = combine_hidden(encode_texts(texts, model.encoder), model)
        return out.logits, out.gate_weights
    if encoder is None:
        raise ValidationError("evaluating a bare expert needs the shared encoder")
    return expert_forward(encode_texts(texts, encoder), model).y, None


def evaluate(dataset, model, encoder: Encoder | None = None, num_classes: int | None = None,
             domain_names: list[str] | None = None, gate_cfg: GateLossConfig | None = None) -> EvalResult:
    """Accuracy and macro-F1 of argmax predictions; routing stats for mixtures."""
    examples = _as_examples(dataset)
    labels = np.array([e.label for e in examples])
    logits, weights = predict_logits([e.text for e in examples], model, encoder)
    c = num_classes or logits.shape[1]
    preds = logits.argmax(axis=1)
    result = EvalResult(accuracy(preds, labels), macro_f1(preds, labels, c), len(examples))
    if weights is not None:
        if domain_names is None:
            domain_names = (dataset.domain_names if isinstance(dataset, Corpus)
                            else [str(i) for i in range(max(e.domain for e in examples) + 1)])
        stats = RoutingStats(list(domain_names), weights.shape[1])
        accumulate_routing(stats, weights, [e.domain for e in examples])
        result.routing = stats
        task, _ = cross_entropy_logits(logits, labels)
        result.gate_breakdown = gate_loss(task, weights, gate_cfg or GateLossConfig())
    return result


# ---------------------------------------------------------------- gradient checking


def grad_check(loss_evaluator, params: list[Param], step: float = 1e-5,
               details: bool = False):
    """Compare analytic gradients with central differences, coordinate by coordinate.

    ``loss_evaluator()`` must return the scalar loss and accumulate its analytic
    gradient into each ``Param.grad``. Returns the maximum of
    ``|g_a - g_n| / max(|g_a|, |g_n|, 1e-8)``, or with ``details`` a list of
    per-parameter maxima as well.
    """
    for p in params:
        p.zero_grad()
    base = loss_evaluator()
    if not math.isfinite(base):
        raise NumericError("loss is not finite")
    analytic = [p.grad.copy() for p in params]
    worst, per_param = 0.0, []
    for p, g_a in zip(params, analytic):
        flat = p.value.reshape(-1)
        g_n = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_evaluator()
            flat[i] = orig - step
            down = loss_evaluator()
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError("loss is not finite under perturbation")
            g_n[i] = (up - down) / (2 * step)
        g_a = g_a.reshape(-1)
        rel = np.abs(g_a - g_n) / np.maximum(np.maximum(np.abs(g_a), np.abs(g_n)), 1e-8)
        m = float(rel.max()) if rel.size else 0.0
        per_param.append(m)
        worst = max(worst, m)
    for p, g in zip(params, analytic):
        p.grad[...] = g
    return (worst, per_param) if details else worst
