"""scikit-learn compatible wrappers around the encoder, experts and mixture.

Typical use::

    enc = SharedEncoderTransformer().fit(texts, domains=domains)
    experts = [AdapterExpertClassifier(encoder=enc, domain_tag=name).fit(tx, ty)
               for name, (tx, ty) in per_domain.items()]
    moe = CollaborativeMoEClassifier(experts=experts).fit(texts, labels, domains=domains)
    moe.predict(["some text"])
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import Example
from .encoder import EncoderConfig, TokenizerConfig, init_encoder
from .exceptions import CompatibilityError, ValidationError
from .expert import expert_forward, init_expert
from .gating import GateLossConfig, init_gating
from .moe import MoEModel, RoutingStats, accumulate_routing, combine_hidden, utilization
from .ndmath import softmax_rows
from .registry import merge_label_universe
from .train import (OptimizerConfig, encode_texts, pretrain_encoder, train_expert,
                    train_gating)


def check_texts(X) -> list[str]:
    """Accept any 1-D iterable of strings (list, array, Series)."""
    if isinstance(X, str):
        raise ValidationError("expected an iterable of texts, got a single string")
    texts = list(np.asarray(X, dtype=object).reshape(-1)) if not isinstance(X, list) else X
    for i, t in enumerate(texts):
        if not isinstance(t, str):
            raise ValidationError(f"sample {i} is {type(t).__name__}, expected str")
    return texts


def _check_targets(y, n: int, name: str = "y") -> np.ndarray:
    y = np.asarray(y).reshape(-1)
    if y.shape[0] != n:
        raise ValidationError(f"{name} has {y.shape[0]} entries for {n} samples")
    return y


def _encode_ids(values, vocabulary) -> np.ndarray:
    lookup = {v: i for i, v in enumerate(vocabulary)}
    try:
        return np.array([lookup[v] for v in values], dtype=np.int64)
    except KeyError as exc:
        raise ValidationError(f"unknown value {exc.args[0]!r}") from None


def _examples(texts, labels, domains) -> list[Example]:
    return [Example(t, int(l), int(d)) for t, l, d in zip(texts, labels, domains)]


class SharedEncoderTransformer(TransformerMixin, BaseEstimator):
    """Pretrains the shared encoder; ``transform`` returns pooled CLS vectors."""

    def __init__(self, hidden_dim=64, num_layers=2, num_heads=4, ff_dim=128, max_len=32,
                 vocab_size=1024, pretrain_target="domain", epochs=3, learning_rate=1e-3,
                 batch_size=16, random_state=0):
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.ff_dim = ff_dim
        self.max_len = max_len
        self.vocab_size = vocab_size
        self.pretrain_target = pretrain_target
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y=None, domains=None):
        texts = check_texts(X)
        cfg = EncoderConfig(self.hidden_dim, self.num_layers, self.num_heads, self.ff_dim, self.max_len)
        tok = TokenizerConfig(self.vocab_size, self.max_len)
        self.encoder_ = init_encoder(cfg, tok, seed=self.random_state)
        target = domains if self.pretrain_target == "domain" else y
        self.pretrain_report_ = None
        if target is not None and self.epochs > 0:
            target = _check_targets(target, len(texts), self.pretrain_target)
            self.pretrain_classes_ = np.unique(target)
            ids = _encode_ids(target, self.pretrain_classes_)
            n_out = max(2, len(self.pretrain_classes_))
            head = init_expert(self.hidden_dim, 1, n_out, seed=self.random_state + 1)
            zeros = np.zeros(len(texts), dtype=np.int64)
            self.pretrain_report_ = pretrain_encoder(
                _examples(texts, ids, zeros), self.encoder_, head,
                OptimizerConfig(learning_rate=self.learning_rate, seed=self.random_state),
                self.epochs, self.batch_size, target="label")
        self.fingerprint_ = self.encoder_.fingerprint()
        self.n_features_out_ = self.hidden_dim
        return self

    def transform(self, X):
        check_is_fitted(self, "encoder_")
        return encode_texts(check_texts(X), self.encoder_)


def _resolve_encoder(encoder):
    if isinstance(encoder, SharedEncoderTransformer):
        check_is_fitted(encoder, "encoder_")
        return encoder.encoder_
    if encoder is None:
        raise ValidationError("an encoder (fitted SharedEncoderTransformer or Encoder) is required")
    return encoder


class AdapterExpertClassifier(ClassifierMixin, BaseEstimator):
    """One domain expert: residual adapter plus linear head on the frozen shared encoder.

    ``classes`` fixes the label order (the default is sorted unique labels);
    it must be a prefix of the mixture's label universe.
    """

    def __init__(self, encoder=None, adapter_dim=64, epochs=30, learning_rate=1e-2, batch_size=16,
                 train_adapter=True, domain_tag="", classes=None, random_state=0):
        self.encoder = encoder
        self.adapter_dim = adapter_dim
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.train_adapter = train_adapter
        self.domain_tag = domain_tag
        self.classes = classes
        self.random_state = random_state

    def fit(self, X, y):
        texts = check_texts(X)
        y = _check_targets(y, len(texts))
        enc = _resolve_encoder(self.encoder)
        self.classes_ = np.asarray(self.classes) if self.classes is not None else np.unique(y)
        if len(self.classes_) < 2:
            raise ValidationError("an expert needs at least two classes")
        ids = _encode_ids(y, list(self.classes_))
        self.expert_ = init_expert(enc.hidden_dim, self.adapter_dim, len(self.classes_),
                                   seed=self.random_state, domain_tag=self.domain_tag)
        self.train_report_ = train_expert(
            _examples(texts, ids, np.zeros(len(texts), dtype=np.int64)), self.expert_, enc,
            OptimizerConfig(learning_rate=self.learning_rate, seed=self.random_state),
            self.epochs, self.batch_size, train_adapter=self.train_adapter)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "expert_")
        return expert_forward(encode_texts(check_texts(X), _resolve_encoder(self.encoder)),
                              self.expert_).y

    def predict_proba(self, X):
        return softmax_rows(self.decision_function(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


class CollaborativeMoEClassifier(ClassifierMixin, BaseEstimator):
    """Gate-weighted mixture of fitted experts; ``fit`` trains only the gate."""

    def __init__(self, experts=(), lambda1=0.01, lambda2=0.1, epochs=10, learning_rate=1e-2,
                 batch_size=16, random_state=0):
        self.experts = experts
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.random_state = random_state

    def _build(self) -> MoEModel:
        if not self.experts:
            raise ValidationError("CollaborativeMoEClassifier needs at least one fitted expert")
        for e in self.experts:
            check_is_fitted(e, "expert_")
        encoders = [_resolve_encoder(e.encoder) for e in self.experts]
        fps = {enc.fingerprint() for enc in encoders}
        if len(fps) != 1:
            raise CompatibilityError("experts were trained on different encoders",
                                     [f"{len(fps)} distinct encoder fingerprints"])
        universe: list = []
        violations = []
        for i, e in enumerate(self.experts):
            merged = merge_label_universe(universe, list(e.classes_))
            if merged is None:
                violations.append(f"expert {i}: classes {list(e.classes_)} conflict with {universe}")
            else:
                universe = merged
        if violations:
            raise CompatibilityError("expert label sets are not prefix-compatible", violations)
        self.classes_ = np.asarray(universe)
        gating = init_gating(encoders[0].hidden_dim, len(self.experts), seed=self.random_state)
        return MoEModel(encoders[0], [e.expert_ for e in self.experts], gating,
                        [str(c) for c in universe])

    def fit(self, X, y, domains=None):
        texts = check_texts(X)
        y = _check_targets(y, len(texts))
        self.model_ = self._build()
        ids = _encode_ids(y, list(self.classes_))
        if domains is None:
            self.domain_names_ = ["all"]
            dom = np.zeros(len(texts), dtype=np.int64)
        else:
            domains = _check_targets(domains, len(texts), "domains")
            self.domain_names_ = [str(d) for d in np.unique(domains)]
            dom = _encode_ids([str(d) for d in domains], self.domain_names_)
        self.train_report_ = train_gating(
            _examples(texts, ids, dom), self.model_, GateLossConfig(self.lambda1, self.lambda2),
            OptimizerConfig(learning_rate=self.learning_rate, seed=self.random_state),
            self.epochs, self.batch_size, self.domain_names_)
        self.routing_stats_ = self.train_report_.routing_stats(-1) if self.epochs else None
        return self

    def _combined(self, X):
        check_is_fitted(self, "model_")
        return combine_hidden(encode_texts(check_texts(X), self.model_.encoder), self.model_)

    def decision_function(self, X):
        return self._combined(X).logits

    def predict_proba(self, X):
        return softmax_rows(self.decision_function(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def route(self, X):
        """Gate weights, one row per text, one column per expert."""
        return self._combined(X).gate_weights

    def routing_report(self, X, domains) -> RoutingStats:
        weights = self.route(X)
        names = [str(d) for d in np.unique(domains)]
        stats = RoutingStats(names, weights.shape[1])
        return accumulate_routing(stats, weights, _encode_ids([str(d) for d in domains], names))

    def utilization(self, X):
        weights = self.route(X)
        stats = RoutingStats(["all"], weights.shape[1])
        return utilization(accumulate_routing(stats, weights, np.zeros(len(weights), np.int64)))
