import numpy as np
import pytest

from moecollab.encoder import (CLS, PAD, EncoderConfig, TokenBatch, TokenizerConfig, encode,
                               encode_backward, init_encoder, pooled_distances, tokenize,
                               tokenize_batch)
from moecollab.exceptions import ShapeError, ValidationError
from moecollab.expert import expert_backward, expert_forward, init_expert
from moecollab.ndmath import Param, cross_entropy_logits
from moecollab.train import grad_check

from conftest import tiny_encoder


def test_tokenize_layout():
    cfg = TokenizerConfig(vocab_size=50, max_len=6)
    b = tokenize("Hello, World hello", cfg)
    assert b.ids.shape == (1, 6)
    assert b.ids[0, 0] == CLS
    assert b.ids[0, 1] == b.ids[0, 3]  # lowercased before hashing
    assert np.all(b.ids[0, 1:4] >= 4) and np.all(b.ids[0, 1:4] < 50)
    np.testing.assert_array_equal(b.mask[0], [1, 1, 1, 1, 0, 0])
    assert np.all(b.ids[0, 4:] == PAD)


def test_tokenize_truncates():
    b = tokenize(" ".join(["w"] * 20), TokenizerConfig(max_len=5))
    assert b.mask.sum() == 5


def test_tokenize_empty_text_keeps_cls():
    b = tokenize("", TokenizerConfig(max_len=4))
    np.testing.assert_array_equal(b.mask[0], [1, 0, 0, 0])


def test_token_batch_indexing_and_validation():
    b = tokenize_batch(["a b", "c", "d e f"], TokenizerConfig(max_len=4))
    assert len(b) == 3 and len(b[[0, 2]]) == 2
    with pytest.raises(ShapeError):
        TokenBatch(np.zeros((2, 3)), np.zeros((2, 4)))


def test_config_validation():
    with pytest.raises(ValidationError):
        EncoderConfig(hidden_dim=10, num_heads=3)
    with pytest.raises(ValidationError):
        TokenizerConfig(vocab_size=3)
    with pytest.raises(ValidationError):
        init_encoder(EncoderConfig(max_len=8), TokenizerConfig(max_len=16))


def test_encode_shape_and_determinism():
    enc = tiny_encoder(seed=3)
    b = enc.tokenize(["one two", "three"])
    h = encode(b, enc)
    assert h.shape == (2, 8)
    np.testing.assert_array_equal(h, encode(b, tiny_encoder(seed=3)))
    assert np.isfinite(h).all()


def test_padding_content_is_ignored():
    enc = tiny_encoder()
    b = enc.tokenize(["alpha beta"])
    noisy = TokenBatch(b.ids.copy(), b.mask.copy())
    noisy.ids[0, 3:] = 17
    np.testing.assert_array_equal(encode(b, enc), encode(noisy, enc))


def test_row_independence():
    enc = tiny_encoder()
    both = encode(enc.tokenize(["alpha beta", "gamma"]), enc)
    np.testing.assert_allclose(both[1], encode(enc.tokenize(["gamma"]), enc)[0], atol=1e-14)


def test_fingerprint_tracks_parameters():
    enc = tiny_encoder()
    fp = enc.fingerprint()
    assert fp == tiny_encoder().fingerprint()
    enc.params["tok_emb"].value[5, 0] += 1e-9
    assert enc.fingerprint() != fp


@pytest.mark.parametrize("seed", range(2))
def test_encoder_gradients(seed):
    rng = np.random.default_rng(seed)
    enc = tiny_encoder(seed=seed)
    for name in ("layer0.ln1_g", "layer0.ln1_b", "layer0.ln2_g", "layer0.ln2_b"):
        enc.params[name].value += rng.normal(0, 0.3, enc.params[name].shape)
    batch = enc.tokenize(["a b c", "d e", "f g h i j", "k"])
    head = init_expert(8, 1, 3, seed=seed)
    labels = [0, 1, 2, 1]
    used = sorted(set(batch.ids.reshape(-1).tolist()))
    # checking every vocabulary row is wasteful: unused rows have exactly zero gradient
    emb_rows = Param(enc.params["tok_emb"].value[used])
    full = enc.params["tok_emb"]

    def evaluate():
        full.value[used] = emb_rows.value
        full.zero_grad()
        tr = expert_forward(encode(batch, enc), head)
        loss, g = cross_entropy_logits(tr.y, labels)
        encode_backward(batch, enc, expert_backward(tr, head, g, train_adapter=False,
                                                    train_head=False))
        emb_rows.grad += full.grad[used]
        return loss

    others = [enc.params[n] for n in enc.param_names() if n != "tok_emb"]
    assert grad_check(evaluate, [emb_rows] + others) <= 1e-4


def test_pooled_distances_oracle():
    h = np.array([[0.0, 0.0], [0.0, 1.0], [3.0, 0.0], [3.0, 1.0]])
    intra, inter = pooled_distances(h, [0, 0, 1, 1])
    assert intra == pytest.approx(1.0)
    assert inter == pytest.approx((3 + np.sqrt(10)) / 2)


def test_width_mismatch_is_shape_error():
    enc = tiny_encoder(max_len=8)
    b = tokenize_batch(["a b"], TokenizerConfig(vocab_size=64, max_len=6))
    with pytest.raises(ShapeError):
        encode(b, enc)


def test_identical_rows_and_permutation():
    enc = tiny_encoder()
    texts = ["one two", "three four five", "one two", "six"]
    h = encode(enc.tokenize(texts), enc)
    np.testing.assert_allclose(h[0], h[2], atol=1e-12)
    perm = [3, 1, 0, 2]
    np.testing.assert_allclose(encode(enc.tokenize([texts[i] for i in perm]), enc), h[perm], atol=1e-12)


def test_backward_is_linear_in_upstream(rng):
    enc = tiny_encoder()
    batch = enc.tokenize(["a b c", "d"])
    encode(batch, enc)
    encode_backward(batch, enc, np.zeros((2, 8)))
    assert all(not p.grad.any() for p in enc.parameters())
    g = rng.normal(size=(2, 8))
    encode_backward(batch, enc, g)
    once = [p.grad.copy() for p in enc.parameters()]
    enc.zero_grad()
    encode_backward(batch, enc, 2 * g)
    for a, p in zip(once, enc.parameters()):
        np.testing.assert_allclose(p.grad, 2 * a, rtol=1e-12, atol=1e-15)


def test_sum_of_pooled_output_gradient(rng):
    enc = tiny_encoder(seed=5)
    # with unit gains the feature-sum of a layer-norm output is constant, which would
    # make every upstream gradient a structural zero
    for name in ("layer0.ln1_g", "layer0.ln1_b", "layer0.ln2_g", "layer0.ln2_b"):
        enc.params[name].value += rng.normal(0, 0.3, enc.params[name].shape)
    batch = enc.tokenize(["x y z", "w", "u v"])

    def evaluate():
        h = encode(batch, enc)
        encode_backward(batch, enc, np.ones_like(h))
        return float(h.sum())

    assert grad_check(evaluate, enc.parameters()) <= 1e-4
