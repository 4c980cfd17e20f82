"""scikit-learn style front end: ``HMNCaptioner().fit(videos, captions).predict(videos)``."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .config import ModelConfig, TrainConfig
from .data import CaptionRecord, Dataset, VideoRecord
from .decoder import beam_search, greedy_decode
from .encoder import VideoFeatures, encode_video
from .language import Vocabulary
from .metrics import EvalCorpus, bleu4
from .training import Checkpoint, save_checkpoint, load_checkpoint, train


def check_video_features(x) -> VideoFeatures:
    """Coerce a mapping with ``context``/``motion``/``objects`` arrays (or a
    ``VideoFeatures``) into validated float64 features."""
    if isinstance(x, VideoFeatures):
        return x
    if isinstance(x, Mapping):
        try:
            return VideoFeatures(x["context"], x["motion"], x["objects"])
        except KeyError as exc:
            raise ValueError(f"video features missing {exc.args[0]!r}") from None
    if isinstance(x, (tuple, list)) and len(x) == 3:
        return VideoFeatures(*x)
    raise TypeError(f"cannot interpret {type(x).__name__} as video features")


def check_videos(X, widths: tuple | None = None) -> list[VideoFeatures]:
    if len(X) == 0:
        raise ValueError("no videos given")
    videos = [check_video_features(x) for x in X]
    if widths is not None:
        for i, v in enumerate(videos):
            got = (v.context.shape[1], v.motion.shape[1], v.objects.shape[1])
            if got != widths:
                raise ValueError(f"video {i} has feature widths {got}, the model was fit on {widths}")
    return videos


def _caption_record(c) -> CaptionRecord:
    if isinstance(c, CaptionRecord):
        return c
    if isinstance(c, Mapping):
        return CaptionRecord(tuple(c["tokens"]), tuple(c.get("entities", ())), tuple(c["predicate"]))
    raise TypeError(f"cannot interpret {type(c).__name__} as a caption record")


def check_captions(y, n_videos: int) -> list[list[CaptionRecord]]:
    """One caption record or a list of them per video."""
    if len(y) != n_videos:
        raise ValueError(f"{len(y)} caption entries for {n_videos} videos")
    out = []
    for i, entry in enumerate(y):
        items = entry if isinstance(entry, (list, tuple)) and not isinstance(entry, CaptionRecord) else [entry]
        if not items:
            raise ValueError(f"video {i} has no captions")
        out.append([_caption_record(c) for c in items])
    return out


class HMNCaptioner(BaseEstimator):
    """Video captioner.

    Parameters
    ----------
    model_config, train_config : configuration objects; ``None`` means the
        full-size defaults.
    beam : beam width used by :meth:`predict`; 1 means greedy decoding.
    max_len : maximum number of words per generated caption.
    """

    def __init__(self, model_config: ModelConfig | None = None, train_config: TrainConfig | None = None,
                 beam: int = 5, max_len: int = 20):
        self.model_config = model_config
        self.train_config = train_config
        self.beam = beam
        self.max_len = max_len

    def fit(self, X, y):
        videos = check_videos(X)
        captions = check_captions(y, len(videos))
        vocab = Vocabulary(sorted({t for caps in captions for c in caps for t in c.tokens}))
        dataset = Dataset(
            [VideoRecord(f"video{i:05d}", v, caps) for i, (v, caps) in enumerate(zip(videos, captions))],
            vocab,
        )
        ckpt = train(dataset, self.model_config or ModelConfig(), self.train_config or TrainConfig())
        self._set_fitted(ckpt)
        return self

    def _set_fitted(self, ckpt: Checkpoint):
        cfg = ckpt.model.config
        self.checkpoint_ = ckpt
        self.model_ = ckpt.model
        self.vocabulary_ = ckpt.model.vocab
        self.history_ = ckpt.history
        self.feature_widths_ = (cfg.context_dim, cfg.motion_dim, cfg.object_dim)

    def predict(self, X) -> list[list[str]]:
        check_is_fitted(self, "model_")
        videos = check_videos(X, self.feature_widths_)
        out = []
        for v in videos:
            if self.beam == 1:
                ids = greedy_decode(self.model_, v, max_len=self.max_len)
            else:
                ids = beam_search(self.model_, v, beam=self.beam, max_len=self.max_len)
            out.append(self.vocabulary_.decode(ids))
        return out

    def transform(self, X) -> np.ndarray:
        """Predicted sentence-level linguistic embeddings, shape ``(n_videos, d_s)``."""
        check_is_fitted(self, "model_")
        videos = check_videos(X, self.feature_widths_)
        with ad.no_grad():
            return np.stack([encode_video(v, self.model_.encoder).g_bar.data[0] for v in videos])

    def score(self, X, y) -> float:
        """Corpus BLEU@4 of the predicted captions against the reference captions."""
        preds = self.predict(X)
        refs = check_captions(y, len(preds))
        corpus = EvalCorpus(
            {i: tuple(p) for i, p in enumerate(preds)},
            {i: [tuple(c.tokens) for c in caps] for i, caps in enumerate(refs)},
        )
        return bleu4(corpus)

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(self.checkpoint_, path)

    @classmethod
    def load(cls, path, beam: int = 5, max_len: int = 20) -> "HMNCaptioner":
        ckpt = load_checkpoint(path)
        est = cls(ckpt.model.config, ckpt.train_config, beam=beam, max_len=max_len)
        est._set_fitted(ckpt)
        return est
