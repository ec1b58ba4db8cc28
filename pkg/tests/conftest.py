import numpy as np
import pytest

from moecollab.encoder import EncoderConfig, TokenizerConfig, init_encoder
from moecollab.expert import init_expert
from moecollab.gating import init_gating
from moecollab.moe import MoEModel


def tiny_encoder(d=8, layers=1, heads=2, ff=16, max_len=8, vocab=64, seed=0):
    return init_encoder(EncoderConfig(d, layers, heads, ff, max_len),
                        TokenizerConfig(vocab, max_len), seed=seed)


def randomize_expert(e, rng, scale=0.5):
    # zero-initialized W_up and biases would hide bugs in their gradients
    for p in e.parameters():
        p.value[...] = rng.normal(0, scale, p.value.shape)
    return e


def tiny_moe(num_classes=(2, 3, 4), d=8, k=4, seed=0, randomize=True):
    rng = np.random.default_rng(seed)
    enc = tiny_encoder(d=d, seed=seed)
    experts = [init_expert(d, k, c, seed=seed + i, domain_tag=f"dom{i}")
               for i, c in enumerate(num_classes)]
    if randomize:
        for e in experts:
            randomize_expert(e, rng)
    gating = init_gating(d, len(experts), seed=seed, scale=0.5 if randomize else 0.01)
    return MoEModel(enc, experts, gating)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
