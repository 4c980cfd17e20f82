import json
import math

import numpy as np
import pytest

from hmn import autodiff as ad
from hmn.autodiff import Parameter
from hmn.config import ConfigError, TrainConfig, load_config, split_config, tiny_config
from hmn.data import synth_generate
from hmn.decoder import greedy_decode
from hmn.language import ToyEmbedder
from hmn.model import LOSS_NAMES, batch_objective, make_batch, total_loss
from hmn.training import (
    AdamState, CheckpointFormatError, TrainingError, adam_step, clip_gradients, load_checkpoint,
    save_checkpoint, train,
)

DEFAULTS = TrainConfig()


# -- loss assembly ----------------------------------------------------------------

def test_total_loss_unit_components():
    assert abs(float(total_loss(1.0, 1.0, 1.0, 1.0, 1.0, DEFAULTS)) - 3.4) < 1e-15


def test_total_loss_zero_weights_is_xent():
    cfg = TrainConfig(lambda_e=0, lambda_p=0, lambda_s=0, lambda_soft=0)
    assert float(total_loss(0.3, 0.2, 0.9, 1.7, 0.4, cfg)) == 1.7


def test_total_loss_matches_weighted_sum(rng):
    for _ in range(100):
        parts = rng.uniform(0, 5, size=5)
        ref = 0.6 * parts[0] + 0.3 * parts[1] + 1.0 * parts[2] + parts[3] + 0.5 * parts[4]
        assert abs(float(total_loss(*parts, DEFAULTS)) - ref) < 1e-12


def test_total_loss_skips_absent_terms():
    assert float(total_loss(None, 1.0, None, 2.0, None, DEFAULTS)) == 2.3


def test_total_loss_rejects_nonfinite():
    with pytest.raises(ad.NonFiniteError):
        total_loss(1.0, math.nan, 1.0, 1.0, 1.0, DEFAULTS)


# -- Adam -----------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_parameters(rng):
    p = Parameter(rng.normal(size=4))
    before = p.data.copy()
    adam_step([p], [np.zeros(4)], AdamState(), lr=0.1)
    np.testing.assert_array_equal(p.data, before)


def test_adam_first_step_is_signed_lr(rng):
    p = Parameter(rng.normal(size=6))
    g = rng.normal(size=6)
    before = p.data.copy()
    adam_step([p], [g], AdamState(), lr=1e-3, eps=1e-12)
    np.testing.assert_allclose(p.data - before, -1e-3 * np.sign(g), rtol=1e-6)


def test_adam_minimises_quadratic(rng):
    A = rng.normal(size=(5, 5))
    H = A @ A.T + np.eye(5)
    x = Parameter(rng.normal(size=5))
    f = lambda: 0.5 * x.data @ H @ x.data
    start = f()
    state = AdamState()
    for _ in range(100):
        adam_step([x], [H @ x.data], state, lr=0.1)
    assert f() < 0.01 * start


def test_clip_gradients():
    grads = [np.array([3.0, 0.0]), np.array([[4.0]])]
    norm = clip_gradients(grads, 1.0)
    assert norm == 5.0
    assert abs(math.sqrt(sum(float(np.sum(g * g)) for g in grads)) - 1.0) < 1e-9


# -- config -----------------------------------------------------------------------------

def test_config_unknown_key(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"d_model": 16, "cut_e2x": True}))
    with pytest.raises(ConfigError, match="cut_e2x"):
        load_config(path)


def test_config_round_trip():
    m, t = split_config({"d_model": 32, "num_heads": 4, "lambda_soft": 0.1, "epochs": 3})
    assert (m.d_model, m.num_heads, t.lambda_soft, t.epochs) == (32, 4, 0.1, 3)


def test_config_defaults():
    m, t = split_config({})
    assert (m.d_model, m.d_s, m.d_w, m.num_queries, m.beam, m.max_len) == (512, 768, 300, 8, 5, 20)
    assert (t.lambda_e, t.lambda_p, t.lambda_s, t.lambda_soft, t.learning_rate, t.batch_size) == \
        (0.6, 0.3, 1.0, 0.5, 1e-4, 64)


@pytest.mark.parametrize("bad", [{"d_model": 15}, {"lambda_e": -1.0}, {"num_heads": 3}, {"batch_size": 0}])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        split_config(bad)


# -- training loop -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_corpus():
    return synth_generate(3, 6)


def small_train(epochs=2, **kw):
    return TrainConfig(epochs=epochs, batch_size=4, learning_rate=1e-3, seed=11, **kw)


def test_train_is_deterministic(small_corpus, tmp_path):
    paths = []
    for name in ("a", "b"):
        ckpt = train(small_corpus, tiny_config(), small_train())
        path = tmp_path / f"{name}.ckpt"
        save_checkpoint(ckpt, path)
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_training_reduces_loss(small_corpus):
    ckpt = train(small_corpus, tiny_config(), small_train(epochs=15))
    totals = [r["total"] for r in ckpt.history]
    assert totals[-1] < totals[0]


def test_history_fields(small_corpus):
    ckpt = train(small_corpus, tiny_config(), small_train(epochs=1))
    assert set(ckpt.history[0]) == {"epoch", *LOSS_NAMES, "total"}


def test_no_entity_ablation_drops_term_and_gradients(small_corpus):
    cfg = tiny_config(no_entity=True)
    logged = []
    ckpt = train(small_corpus, cfg, small_train(epochs=1), on_epoch=logged.append)
    assert "L_e" not in logged[0]
    model = ckpt.model
    targets = small_corpus.targets(ToyEmbedder(model.config.d_s, model.config.embed_seed), model.config.num_queries)
    batch = make_batch([small_corpus.videos[0].features], [targets[0][0]], small_corpus.vocab)
    model.zero_grad()
    batch_objective(model.losses(batch, None), TrainConfig()).backward()
    for p in (*model.encoder.entity_head.parameters(), *model.encoder.object_decoder.parameters()):
        assert p.grad is None or not np.any(p.grad)


def test_empty_dataset_is_error():
    from hmn.data import Dataset
    from hmn.language import Vocabulary
    with pytest.raises(TrainingError):
        train(Dataset([], Vocabulary()), tiny_config(), small_train())


def test_mismatched_widths_rejected(small_corpus):
    with pytest.raises(ValueError, match="context_dim"):
        train(small_corpus, tiny_config(context_dim=5), small_train())


# -- checkpoints ------------------------------------------------------------------------------

def test_checkpoint_round_trip(small_corpus, tmp_path):
    ckpt = train(small_corpus, tiny_config(), small_train())
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(ckpt, a)
    loaded = load_checkpoint(a)
    save_checkpoint(loaded, b)
    assert a.read_bytes() == b.read_bytes()
    for (n1, p1), (n2, p2) in zip(ckpt.model.named_parameters(), loaded.model.named_parameters()):
        assert n1 == n2
        assert p1.data.tobytes() == p2.data.tobytes()
    assert loaded.train_config == ckpt.train_config
    assert loaded.rng_state == json.loads(json.dumps(ckpt.rng_state))
    for v in small_corpus.videos:
        assert greedy_decode(ckpt.model, v.features) == greedy_decode(loaded.model, v.features)


def test_checkpoint_layout(small_corpus, tmp_path):
    ckpt = train(small_corpus, tiny_config(), small_train(epochs=1))
    path = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, path)
    buf = path.read_bytes()
    assert buf[:4] == b"HMNC"
    assert int.from_bytes(buf[4:8], "little") == 1
    assert int.from_bytes(buf[8:12], "little") == len(ckpt.model.parameters())


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_truncated(small_corpus, tmp_path):
    ckpt = train(small_corpus, tiny_config(), small_train(epochs=1))
    path = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, path)
    path.write_bytes(path.read_bytes()[:200])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_checkpoint_unknown_version(small_corpus, tmp_path):
    ckpt = train(small_corpus, tiny_config(), small_train(epochs=1))
    path = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, path)
    buf = bytearray(path.read_bytes())
    buf[4:8] = (9).to_bytes(4, "little")
    path.write_bytes(bytes(buf))
    with pytest.raises(CheckpointFormatError, match="version"):
        load_checkpoint(path)
