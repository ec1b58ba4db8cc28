import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from moecollab.data import Example, SynthSpec, split, synth_generate
from moecollab.encoder import pooled_distances
from moecollab.exceptions import NumericError, ValidationError
from moecollab.expert import init_expert
from moecollab.gating import GateLossConfig, init_gating
from moecollab.moe import MoEModel
from moecollab.ndmath import Param
from moecollab.train import (Optimizer, OptimizerConfig, TrainReport, accuracy, encode_texts,
                             evaluate, grad_check, macro_f1, pretrain_encoder, train_expert,
                             train_gating)

from conftest import tiny_encoder
from desk import desk_pipeline


def brute_macro_f1(preds, labels, k):
    scores = []
    for c in range(k):
        tp = sum(p == c and y == c for p, y in zip(preds, labels))
        fp = sum(p == c and y != c for p, y in zip(preds, labels))
        fn = sum(p != c and y == c for p, y in zip(preds, labels))
        scores.append(0.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    return sum(scores) / k


def separable(n=50, seed=0):
    rng = np.random.default_rng(seed)
    pools = [["sun", "warm", "bright", "day"], ["moon", "cold", "dark", "night"]]
    out = []
    for i in range(n):
        c = i % 2
        out.append(Example(" ".join(rng.choice(pools[c], 5)), c, 0))
    return out


def small_mixture(seed=0):
    corpus = synth_generate(SynthSpec(num_domains=2, classes_per_domain=(2, 3),
                                      samples_per_class=8, seed=seed))
    enc = tiny_encoder(d=16, heads=2, ff=16, max_len=16, vocab=256, seed=seed)
    experts = [init_expert(16, 4, 2, seed=1, domain_tag="domain0"),
               init_expert(16, 4, 3, seed=2, domain_tag="domain1")]
    for d, e in enumerate(experts):
        train_expert(corpus.by_domain(d), e, enc, OptimizerConfig(learning_rate=1e-2), 5)
    return corpus, MoEModel(enc, experts, init_gating(16, 2, seed=seed))


def snapshot(params):
    return [p.value.copy() for p in params]


# ---------------------------------------------------------------- optimizers


def test_sgd_momentum_on_quadratic():
    w = Param(np.array([[3.0, -4.0, 1.0]]))
    opt = Optimizer([w], OptimizerConfig(kind="sgd_momentum", learning_rate=0.1, momentum=0.0))
    for _ in range(200):
        opt.zero_grad()
        w.grad += 2 * w.value
        opt.step()
    assert np.linalg.norm(w.value) < 1e-3


def test_adam_on_quadratic():
    w = Param(np.array([[3.0, -4.0]]))
    opt = Optimizer([w], OptimizerConfig(learning_rate=0.1))
    for _ in range(500):
        opt.zero_grad()
        w.grad += 2 * w.value
        opt.step()
    assert np.linalg.norm(w.value) < 1e-2


def test_adam_first_step_is_learning_rate_sized():
    w = Param(np.array([[1.0, -1.0]]))
    opt = Optimizer([w], OptimizerConfig(learning_rate=0.01))
    w.grad += np.array([[5.0, -0.001]])
    opt.step()
    np.testing.assert_allclose(w.value, [[0.99, -0.99]], atol=1e-6)


@pytest.mark.parametrize("kwargs", [dict(kind="rmsprop"), dict(learning_rate=0.0),
                                    dict(momentum=1.0), dict(beta2=-0.1)])
def test_optimizer_config_validation(kwargs):
    with pytest.raises(ValidationError):
        OptimizerConfig(**kwargs)


# ---------------------------------------------------------------- metrics


def test_evaluation_examples():
    assert accuracy([0, 0, 1, 1], [0, 1, 0, 1]) == 0.5
    assert macro_f1([0, 0, 1, 1], [0, 1, 0, 1], 2) == 0.5
    assert macro_f1([2, 1, 0], [2, 1, 0], 3) == 1.0
    # class 2 never occurs: contributes 0 to the average
    assert macro_f1([0, 1], [0, 1], 3) == pytest.approx(2 / 3)


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=30))
def test_macro_f1_matches_brute_force(pairs):
    preds, labels = zip(*pairs)
    assert macro_f1(preds, labels, 4) == pytest.approx(brute_macro_f1(preds, labels, 4), abs=1e-12)


# ---------------------------------------------------------------- grad_check


def test_grad_check_exact_for_quadratic(rng):
    x = rng.normal(size=(4, 3))
    W = Param(rng.normal(size=(3, 2)))

    def evaluate():
        out = x @ W.value
        W.grad += x.T @ out
        return 0.5 * float(np.sum(out ** 2))

    assert grad_check(evaluate, [W]) <= 1e-8


def test_grad_check_detects_wrong_gradient():
    w = Param(np.array([[1.0, 2.0]]))

    def evaluate():
        w.grad += 3 * w.value  # true gradient is 2w
        return float(np.sum(w.value ** 2))

    err, per = grad_check(evaluate, [w], details=True)
    assert err == pytest.approx(1 / 3, rel=1e-6) and len(per) == 1


def test_grad_check_nonfinite_loss():
    w = Param(np.zeros((1, 1)))
    with pytest.raises(NumericError):
        grad_check(lambda: float("nan"), [w])


# ---------------------------------------------------------------- training phases


def test_separable_toy_reaches_high_accuracy():
    enc = tiny_encoder(d=16, heads=2, max_len=8, vocab=128)
    e = init_expert(16, 4, 2, seed=0)
    report = train_expert(separable(50), e, enc, OptimizerConfig(learning_rate=1e-2), 20)
    assert report.epochs[-1].accuracy >= 0.95


def test_zero_epochs_is_a_no_op():
    enc = tiny_encoder()
    e = init_expert(8, 4, 2)
    before = snapshot(e.parameters())
    report = train_expert(separable(10), e, enc, OptimizerConfig(), 0)
    assert report.epochs == []
    assert all(np.array_equal(a, p.value) for a, p in zip(before, e.parameters()))


def test_expert_training_is_deterministic():
    def run():
        e = init_expert(8, 4, 2, seed=3)
        return train_expert(separable(20), e, tiny_encoder(), OptimizerConfig(seed=5), 3).losses()

    assert run() == run()


def test_expert_training_leaves_encoder_untouched():
    enc = tiny_encoder()
    before = snapshot(enc.parameters())
    train_expert(separable(10), init_expert(8, 4, 2), enc, OptimizerConfig(), 2)
    assert all(np.array_equal(a, p.value) for a, p in zip(before, enc.parameters()))


def test_label_overflow_and_empty_dataset():
    with pytest.raises(ValidationError):
        train_expert([Example("x", 5, 0)], init_expert(8, 4, 2), tiny_encoder(), OptimizerConfig(), 1)
    with pytest.raises(ValidationError):
        train_expert([], init_expert(8, 4, 2), tiny_encoder(), OptimizerConfig(), 1)


def test_gate_training_freezes_experts_and_encoder():
    corpus, m = small_mixture()
    frozen = [p for e in m.experts for p in e.parameters()] + m.encoder.parameters()
    before = snapshot(frozen)
    gate_before = snapshot(m.gating.parameters())
    report = train_gating(corpus, m, GateLossConfig(), OptimizerConfig(learning_rate=1e-2), 3)
    assert all(np.array_equal(a, p.value) for a, p in zip(before, frozen))
    assert not all(np.array_equal(a, p.value) for a, p in zip(gate_before, m.gating.parameters()))
    assert [r.epoch for r in report.epochs] == [1, 2, 3]
    for r in report.epochs:
        assert all(math.isfinite(v) for v in r.breakdown.values())
        assert math.isfinite(r.running_loss)


def test_gate_training_deterministic_and_report_round_trip():
    def run():
        corpus, m = small_mixture(seed=1)
        return corpus, train_gating(corpus, m, GateLossConfig(), OptimizerConfig(learning_rate=1e-2), 2)

    corpus, a = run()
    _, b = run()
    strip = [{k: v for k, v in r.items() if k != "wall_time"} for r in a.to_dict()["epochs"]]
    assert strip == [{k: v for k, v in r.items() if k != "wall_time"} for r in b.to_dict()["epochs"]]
    back = TrainReport.from_dict(json.loads(a.to_json()))
    assert back.losses() == a.losses()
    assert back.routing_stats(-1).weight_mass.sum() == pytest.approx(len(corpus))
    assert a.to_csv().splitlines()[0].startswith("epoch,loss,task,mean_entropy,balance_kl")


def test_zero_lambdas_reduce_to_task_loss():
    corpus, m = small_mixture()
    report = train_gating(corpus, m, GateLossConfig(0.0, 0.0), OptimizerConfig(learning_rate=1e-2), 2)
    for r in report.epochs:
        assert r.loss == r.breakdown["task"]


def test_gate_loss_mostly_non_increasing_on_synthetic_suite():
    losses = desk_pipeline(0).gate_report.losses()
    steps = [b <= a for a, b in zip(losses, losses[1:])]
    assert sum(steps) / len(steps) >= 0.8


def test_pretraining_separates_domains_and_changes_fingerprint():
    corpus = synth_generate(SynthSpec(num_domains=2, classes_per_domain=(2, 2),
                                      samples_per_class=15, seed=4))
    enc = tiny_encoder(d=16, heads=2, ff=32, max_len=16, vocab=256, seed=4)
    fp = enc.fingerprint()
    head = init_expert(16, 1, 2, seed=5)
    report = pretrain_encoder(corpus, enc, head, OptimizerConfig(learning_rate=1e-2), 3,
                              target="domain")
    assert enc.fingerprint() != fp
    assert len(report.epochs) == 3
    intra, inter = pooled_distances(encode_texts(corpus.texts, enc), corpus.domains)
    assert inter > intra


def test_pretraining_is_deterministic():
    corpus = synth_generate(SynthSpec(num_domains=2, classes_per_domain=(2, 2),
                                      samples_per_class=5))

    def run():
        enc = tiny_encoder(seed=1)
        pretrain_encoder(corpus, enc, init_expert(8, 1, 2), OptimizerConfig(), 1, target="label")
        return enc.fingerprint()

    assert run() == run()


def test_pretraining_rejects_unknown_target():
    with pytest.raises(ValidationError):
        pretrain_encoder(separable(4), tiny_encoder(), init_expert(8, 1, 2), OptimizerConfig(), 1,
                         target="nope")


def test_evaluate_mixture_reports_routing():
    corpus, m = small_mixture()
    _, held = split(corpus, 0.5, seed=0)
    res = evaluate(held, m)
    assert res.routing is not None
    assert res.routing.weight_mass.sum() == pytest.approx(len(held))
    assert 0 <= res.macro_f1 <= 1
    with pytest.raises(ValidationError):
        evaluate(held, m.experts[0])
