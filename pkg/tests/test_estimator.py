import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from hmn.config import TrainConfig, tiny_config
from hmn.data import synth_generate
from hmn.decoder import greedy_decode
from hmn.estimator import HMNCaptioner, check_captions, check_video_features, check_videos


@pytest.fixture(scope="module")
def corpus():
    ds = synth_generate(5, 6)
    X = [{"context": v.features.context, "motion": v.features.motion, "objects": v.features.objects}
         for v in ds.videos]
    y = [{"tokens": c.tokens, "entities": c.entities, "predicate": c.predicate}
         for v in ds.videos for c in v.captions]
    return X, y


@pytest.fixture(scope="module")
def fitted(corpus):
    X, y = corpus
    est = HMNCaptioner(tiny_config(), TrainConfig(epochs=3, batch_size=3, learning_rate=1e-3), beam=1, max_len=8)
    return est.fit(X, y)


def test_get_params_and_clone():
    est = HMNCaptioner(tiny_config(), beam=2)
    params = est.get_params()
    assert set(params) == {"model_config", "train_config", "beam", "max_len"}
    assert params["beam"] == 2
    twin = clone(est)
    assert twin.get_params() == params
    assert twin.set_params(beam=4).beam == 4


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        HMNCaptioner().predict([{"context": np.ones((2, 3)), "motion": np.ones((2, 3)), "objects": np.ones((1, 3))}])


def test_fit_predict(corpus, fitted):
    X, _ = corpus
    preds = fitted.predict(X)
    assert len(preds) == len(X)
    assert all(isinstance(w, str) for p in preds for w in p)
    assert all(len(p) <= 8 for p in preds)
    assert len(fitted.history_) == 3


def test_greedy_predict_matches_decoder(corpus, fitted):
    X, _ = corpus
    v = check_video_features(X[0])
    assert fitted.predict(X[:1])[0] == fitted.vocabulary_.decode(greedy_decode(fitted.model_, v, max_len=8))


def test_transform_shape(corpus, fitted):
    X, _ = corpus
    assert fitted.transform(X).shape == (len(X), 12)


def test_score_range(corpus, fitted):
    X, y = corpus
    assert 0.0 <= fitted.score(X, y) <= 1.0


def test_save_load(corpus, fitted, tmp_path):
    X, _ = corpus
    fitted.save(tmp_path / "m.ckpt")
    again = HMNCaptioner.load(tmp_path / "m.ckpt", beam=1, max_len=8)
    assert again.predict(X) == fitted.predict(X)


def test_width_mismatch(fitted):
    bad = {"context": np.ones((3, 5)), "motion": np.ones((3, 32)), "objects": np.ones((2, 32))}
    with pytest.raises(ValueError, match="widths"):
        fitted.predict([bad])


def test_check_video_features_forms(rng):
    arrays = (rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(2, 4)))
    a = check_video_features(arrays)
    b = check_video_features(dict(zip(("context", "motion", "objects"), arrays)))
    np.testing.assert_array_equal(a.objects, b.objects)
    assert check_video_features(a) is a
    with pytest.raises(ValueError, match="motion"):
        check_video_features({"context": arrays[0], "objects": arrays[2]})
    with pytest.raises(TypeError):
        check_video_features(3.0)


def test_check_videos_empty():
    with pytest.raises(ValueError):
        check_videos([])


def test_check_captions_errors():
    cap = {"tokens": ["a", "dog"], "entities": [1], "predicate": [0, 2]}
    assert len(check_captions([cap, [cap, cap]], 2)[1]) == 2
    with pytest.raises(ValueError, match="caption entries"):
        check_captions([cap], 2)
    with pytest.raises(ValueError, match="no captions"):
        check_captions([[]], 1)
    with pytest.raises(TypeError):
        check_captions(["a dog"], 1)
