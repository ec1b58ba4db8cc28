"""Hash tokenizer and the compact shared transformer encoder.

The encoder is a stack of post-layer-norm blocks (masked multi-head
self-attention, then a ReLU feed-forward), pooled at the CLS position. Keys
carry no bias: it would shift every score of a query equally and cancel in the
softmax.

``encode_backward`` re-runs the forward pass and back-propagates by hand.
"""
from __future__ import annotations

import json
import re
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import ShapeError, ValidationError
from .ndmath import Param, relu, softmax_rows_backward

PAD, CLS, UNK, SEP = 0, 1, 2, 3
NUM_RESERVED = 4
LN_EPS = 1e-5

_TOKEN_RE = re.compile(r"[^0-9A-Za-z]+")


@dataclass(frozen=True)
class TokenizerConfig:
    vocab_size: int = 1024
    max_len: int = 32
    lowercase: bool = True

    def __post_init__(self):
        if self.vocab_size < NUM_RESERVED + 1:
            raise ValidationError(f"vocab_size must be >= {NUM_RESERVED + 1}, got {self.vocab_size}")
        if self.max_len < 2:
            raise ValidationError(f"max_len must be >= 2, got {self.max_len}")


@dataclass(frozen=True)
class EncoderConfig:
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ff_dim: int = 128
    max_len: int = 32

    def __post_init__(self):
        for name in ("hidden_dim", "num_layers", "num_heads", "ff_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden_dim % self.num_heads:
            raise ValidationError(
                f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}")


@dataclass
class TokenBatch:
    ids: np.ndarray   # (batch, max_len) int64
    mask: np.ndarray  # (batch, max_len) float64 of 0/1

    def __post_init__(self):
        self.ids = np.atleast_2d(np.asarray(self.ids, dtype=np.int64))
        self.mask = np.atleast_2d(np.asarray(self.mask, dtype=np.float64))
        if self.ids.shape != self.mask.shape:
            raise ShapeError(f"ids shape {self.ids.shape} != mask shape {self.mask.shape}")

    def __len__(self) -> int:
        return self.ids.shape[0]

    def __getitem__(self, idx) -> "TokenBatch":
        return TokenBatch(self.ids[idx], self.mask[idx])


def _hash_token(token: str, vocab_size: int) -> int:
    return NUM_RESERVED + zlib.crc32(token.encode("utf-8")) % (vocab_size - NUM_RESERVED)


def tokenize(text: str, config: TokenizerConfig) -> TokenBatch:
    """Tokenize one string into a single-row batch: CLS, hashed tokens, right padding."""
    if config.lowercase:
        text = text.lower()
    tokens = [t for t in _TOKEN_RE.split(text) if t]
    ids = np.full(config.max_len, PAD, dtype=np.int64)
    mask = np.zeros(config.max_len)
    ids[0] = CLS
    body = tokens[: config.max_len - 1]
    for i, tok in enumerate(body, start=1):
        ids[i] = _hash_token(tok, config.vocab_size)
    mask[: len(body) + 1] = 1.0
    return TokenBatch(ids[None, :], mask[None, :])


def tokenize_batch(texts, config: TokenizerConfig) -> TokenBatch:
    rows = [tokenize(t, config) for t in texts]
    if not rows:
        return TokenBatch(np.zeros((0, config.max_len), np.int64), np.zeros((0, config.max_len)))
    return TokenBatch(np.concatenate([r.ids for r in rows]), np.concatenate([r.mask for r in rows]))


def _layer_names(i: int) -> list[str]:
    p = f"layer{i}."
    return [p + n for n in ("Wq", "bq", "Wk", "Wv", "bv", "Wo", "bo", "ln1_g", "ln1_b",
                            "W1", "b1", "W2", "b2", "ln2_g", "ln2_b")]


@dataclass
class Encoder:
    config: EncoderConfig
    tokenizer: TokenizerConfig
    params: dict[str, Param] = field(default_factory=dict)

    def __post_init__(self):
        if self.config.max_len != self.tokenizer.max_len:
            raise ValidationError(
                f"encoder max_len {self.config.max_len} != tokenizer max_len {self.tokenizer.max_len}")
        expected = self.expected_shapes()
        if set(self.params) != set(expected):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ShapeError(f"encoder parameters mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {self.params[name].shape}")

    @property
    def hidden_dim(self) -> int:
        return self.config.hidden_dim

    def expected_shapes(self) -> dict[str, tuple[int, int]]:
        c = self.config
        d, f = c.hidden_dim, c.ff_dim
        shapes = {"tok_emb": (self.tokenizer.vocab_size, d), "pos_emb": (c.max_len, d)}
        for i in range(c.num_layers):
            names = _layer_names(i)
            dims = [(d, d), (1, d), (d, d), (d, d), (1, d), (d, d), (1, d), (1, d), (1, d),
                    (d, f), (1, f), (f, d), (1, d), (1, d), (1, d)]
            shapes.update(zip(names, dims))
        return shapes

    def parameters(self) -> list[Param]:
        return [self.params[k] for k in self.param_names()]

    def param_names(self) -> list[str]:
        return list(self.expected_shapes())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def config_dict(self) -> dict:
        return {"encoder": asdict(self.config), "tokenizer": asdict(self.tokenizer)}

    def tokenize(self, texts) -> TokenBatch:
        if isinstance(texts, str):
            texts = [texts]
        return tokenize_batch(list(texts), self.tokenizer)

    def fingerprint(self) -> int:
        """64-bit FNV-1a over the canonical config JSON and the little-endian parameter bytes."""
        from .registry import fnv1a_64

        blob = bytearray(json.dumps(self.config_dict(), sort_keys=True, separators=(",", ":")).encode())
        for name in self.param_names():
            blob += name.encode()
            blob += self.params[name].value.astype("<f8").tobytes()
        return fnv1a_64(bytes(blob))


def init_encoder(config: EncoderConfig | None = None, tokenizer: TokenizerConfig | None = None,
                 seed: int = 0) -> Encoder:
    config = config or EncoderConfig()
    tokenizer = tokenizer or TokenizerConfig(max_len=config.max_len)
    rng = np.random.default_rng(seed)
    d, f = config.hidden_dim, config.ff_dim
    params: dict[str, Param] = {
        "tok_emb": Param(rng.normal(0.0, 0.5, (tokenizer.vocab_size, d))),
        "pos_emb": Param(rng.normal(0.0, 0.1, (config.max_len, d))),
    }

    def glorot(n_in, n_out):
        lim = np.sqrt(6.0 / (n_in + n_out))
        return Param(rng.uniform(-lim, lim, (n_in, n_out)))

    for i in range(config.num_layers):
        p = f"layer{i}."
        for w in ("Wq", "Wk", "Wv", "Wo"):
            params[p + w] = glorot(d, d)
        for b in ("bq", "bv", "bo", "ln1_b", "ln2_b", "b2"):
            params[p + b] = Param(np.zeros((1, d)))
        params[p + "ln1_g"] = Param(np.ones((1, d)))
        params[p + "ln2_g"] = Param(np.ones((1, d)))
        params[p + "W1"] = glorot(d, f)
        params[p + "b1"] = Param(np.zeros((1, f)))
        params[p + "W2"] = glorot(f, d)
    return Encoder(config, tokenizer, params)


# ---------------------------------------------------------------- forward / backward


def _layer_norm(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv_std
    return xhat * gamma + beta, (xhat, inv_std)


def _layer_norm_backward(grad_y, gamma, cache):
    xhat, inv_std = cache
    gxhat = grad_y * gamma
    grad_x = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
    grad_gamma = (grad_y * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0, keepdims=True)
    grad_beta = grad_y.reshape(-1, xhat.shape[-1]).sum(axis=0, keepdims=True)
    return grad_x, grad_gamma, grad_beta


def _split_heads(x, h):
    b, t, d = x.shape
    return x.reshape(b, t, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _check_batch(batch: TokenBatch, enc: Encoder) -> None:
    if batch.ids.shape[1] != enc.config.max_len:
        raise ShapeError(f"batch width {batch.ids.shape[1]} != encoder max_len {enc.config.max_len}")
    if batch.ids.size and (batch.ids.min() < 0 or batch.ids.max() >= enc.tokenizer.vocab_size):
        raise ShapeError(f"token ids outside [0, {enc.tokenizer.vocab_size})")


def _forward(batch: TokenBatch, enc: Encoder):
    _check_batch(batch, enc)
    P = {k: p.value for k, p in enc.params.items()}
    nh = enc.config.num_heads
    d = enc.config.hidden_dim
    scale = 1.0 / np.sqrt(d // nh)
    key_ok = batch.mask[:, None, None, :] > 0.5  # (b, 1, 1, t)

    x = P["tok_emb"][batch.ids] + P["pos_emb"][None, :, :]
    caches = []
    for i in range(enc.config.num_layers):
        p = f"layer{i}."
        q = _split_heads(x @ P[p + "Wq"] + P[p + "bq"], nh)
        k = _split_heads(x @ P[p + "Wk"], nh)
        v = _split_heads(x @ P[p + "Wv"] + P[p + "bv"], nh)
        scores = np.where(key_ok, q @ k.transpose(0, 1, 3, 2) * scale, -np.inf)
        attn = _masked_softmax(scores)
        ctx = _merge_heads(attn @ v)
        r1 = x + ctx @ P[p + "Wo"] + P[p + "bo"]
        x1, ln1 = _layer_norm(r1, P[p + "ln1_g"], P[p + "ln1_b"])
        f_pre = x1 @ P[p + "W1"] + P[p + "b1"]
        f_act = relu(f_pre)
        r2 = x1 + f_act @ P[p + "W2"] + P[p + "b2"]
        x2, ln2 = _layer_norm(r2, P[p + "ln2_g"], P[p + "ln2_b"])
        caches.append((x, q, k, v, attn, ctx, x1, ln1, f_pre, f_act, ln2))
        x = x2
    return x[:, 0, :].copy(), caches


def _masked_softmax(scores):
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    return e / e.sum(axis=-1, keepdims=True)


def encode(batch: TokenBatch, enc: Encoder) -> np.ndarray:
    """Pooled CLS representation, shape ``(batch, hidden_dim)``."""
    out, _ = _forward(batch, enc)
    return out


def encode_backward(batch: TokenBatch, enc: Encoder, upstream_grad: np.ndarray) -> None:
    """Accumulate gradients of ``sum(encode(batch) * upstream_grad)`` into ``enc.params``."""
    out, caches = _forward(batch, enc)
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    if upstream_grad.shape != out.shape:
        raise ShapeError(f"upstream grad shape {upstream_grad.shape} != encoder output {out.shape}")
    P = enc.params
    nh = enc.config.num_heads
    d = enc.config.hidden_dim
    scale = 1.0 / np.sqrt(d // nh)
    b, t = batch.ids.shape

    gx = np.zeros((b, t, d))
    gx[:, 0, :] = upstream_grad
    for i in reversed(range(enc.config.num_layers)):
        p = f"layer{i}."
        x, q, k, v, attn, ctx, x1, ln1, f_pre, f_act, ln2 = caches[i]

        g_r2, gg, gb = _layer_norm_backward(gx, P[p + "ln2_g"].value, ln2)
        P[p + "ln2_g"].grad += gg
        P[p + "ln2_b"].grad += gb
        # feed-forward branch
        g_fact = g_r2 @ P[p + "W2"].value.T
        P[p + "W2"].grad += f_act.reshape(-1, f_act.shape[-1]).T @ g_r2.reshape(-1, d)
        P[p + "b2"].grad += g_r2.reshape(-1, d).sum(axis=0, keepdims=True)
        g_fpre = g_fact * (f_pre > 0.0)
        P[p + "W1"].grad += x1.reshape(-1, d).T @ g_fpre.reshape(-1, g_fpre.shape[-1])
        P[p + "b1"].grad += g_fpre.reshape(-1, g_fpre.shape[-1]).sum(axis=0, keepdims=True)
        g_x1 = g_r2 + g_fpre @ P[p + "W1"].value.T

        g_r1, gg, gb = _layer_norm_backward(g_x1, P[p + "ln1_g"].value, ln1)
        P[p + "ln1_g"].grad += gg
        P[p + "ln1_b"].grad += gb
        # attention branch
        P[p + "Wo"].grad += ctx.reshape(-1, d).T @ g_r1.reshape(-1, d)
        P[p + "bo"].grad += g_r1.reshape(-1, d).sum(axis=0, keepdims=True)
        g_ctx = _split_heads(g_r1 @ P[p + "Wo"].value.T, nh)
        g_attn = g_ctx @ v.transpose(0, 1, 3, 2)
        g_v = attn.transpose(0, 1, 3, 2) @ g_ctx
        g_scores = softmax_rows_backward(attn, g_attn) * scale
        g_q = g_scores @ k
        g_k = g_scores.transpose(0, 1, 3, 2) @ q
        gx_next = g_r1.copy()
        xf = x.reshape(-1, d)
        for name, g in (("q", g_q), ("k", g_k), ("v", g_v)):
            g2 = _merge_heads(g).reshape(-1, d)
            P[p + "W" + name].grad += xf.T @ g2
            if name != "k":
                P[p + "b" + name].grad += g2.sum(axis=0, keepdims=True)
            gx_next += (g2 @ P[p + "W" + name].value.T).reshape(b, t, d)
        gx = gx_next

    np.add.at(P["tok_emb"].grad, batch.ids.reshape(-1), gx.reshape(-1, d))
    P["pos_emb"].grad += gx.sum(axis=0)


def pooled_distances(h: np.ndarray, groups) -> tuple[float, float]:
    """Mean (intra-group, inter-group) Euclidean distance between pooled rows."""
    groups = np.asarray(groups)
    dist = np.sqrt(((h[:, None, :] - h[None, :, :]) ** 2).sum(-1))
    same = groups[:, None] == groups[None, :]
    off_diag = ~np.eye(len(groups), dtype=bool)
    return float(dist[same & off_diag].mean()), float(dist[~same].mean())
