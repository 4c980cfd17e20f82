import numpy as np
import pytest

from hmn.config import ModelConfig, TrainConfig, tiny_config
from hmn.data import synth_generate
from hmn.encoder import VideoFeatures
from hmn.language import Vocabulary
from hmn.model import HMNModel

# desk-scale overfit setting shared by the acceptance suite
OVERFIT_SEED = 7
OVERFIT_VIDEOS = 32
OVERFIT_EPOCHS = 300


def overfit_configs(num_queries: int = 4) -> tuple[ModelConfig, TrainConfig]:
    model = ModelConfig(d_model=64, d_s=16, d_w=32, d_hidden=64, d_att=64,
                        num_queries=num_queries, num_heads=4)
    train = TrainConfig(lambda_e=0.6, lambda_p=0.3, lambda_s=1.0, lambda_soft=0.5,
                        learning_rate=3e-3, batch_size=8, epochs=OVERFIT_EPOCHS, seed=OVERFIT_SEED)
    return model, train


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_video(rng, T=3, L=5, dim=6) -> VideoFeatures:
    return VideoFeatures(rng.normal(size=(T, dim)), rng.normal(size=(T, dim)), rng.normal(size=(L, dim)))


def tiny_model(seed: int = 0, dim: int = 6, vocab_words: int = 16, **overrides) -> HMNModel:
    vocab = Vocabulary([f"w{i}" for i in range(vocab_words)])
    cfg = tiny_config(context_dim=dim, motion_dim=dim, object_dim=dim, init_seed=seed, **overrides)
    return HMNModel(cfg, vocab)


@pytest.fixture(scope="session")
def synth_corpus():
    return synth_generate(OVERFIT_SEED, OVERFIT_VIDEOS)


# (criterion, passed, detail) lines filled in by the acceptance suite
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}")
