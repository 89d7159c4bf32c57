import pytest

from forkmerge.decoder import Decoder, ModelConfig
from forkmerge.fusion import ModalityLayout, random_fixture


def make_model(seed=0, n_layers=4, n_heads=4, d_model=32, vocab=64, **kw):
    cfg = ModelConfig(n_layers=n_layers, n_heads=n_heads, d_model=d_model, d_ff=2 * d_model,
                      vocab_size=vocab, max_seq_len=kw.pop("max_seq_len", 128), **kw)
    return Decoder.random(cfg, seed)


def make_input(model, seed=0, M=5, N=4, L=3, mode="token_wise"):
    if mode == "token_wise":
        layout = ModalityLayout.token_wise(M, N, L)
    else:
        layout = ModalityLayout.channel_wise(M, L)
    return random_fixture(seed, layout, model.config.d_model, model.config.vocab_size).to_input(model)


@pytest.fixture
def model():
    return make_model(1)


@pytest.fixture
def inp(model):
    return make_input(model, 2)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
