"""Finite-difference check of the full training objective on a tiny random problem."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .autodiff import grad_check
from .config import ModelConfig, TrainConfig
from .data import CaptionRecord, caption_target
from .encoder import VideoFeatures
from .language import BigramELM, ToyEmbedder, Vocabulary
from .model import HMNModel, batch_objective, make_batch


def tiny_problem(config: ModelConfig, T: int = 3, L: int = 5, vocab_size: int = 20,
                 n_videos: int = 2, raw_dim: int = 6, seed: int = 0):
    """Random videos and captions sized for exhaustive gradient checks.

    Returns ``(model, batch, elm)``; the vocabulary has ``vocab_size`` entries
    including the four markers.
    """
    rng = np.random.default_rng(seed)
    vocab = Vocabulary([f"w{i}" for i in range(vocab_size - 4)])
    config = replace(config, context_dim=raw_dim, motion_dim=raw_dim, object_dim=raw_dim,
                     vocab_size=len(vocab))
    embedder = ToyEmbedder(config.d_s, config.embed_seed)
    words = vocab.words[4:]
    videos, targets = [], []
    for _ in range(n_videos):
        videos.append(VideoFeatures(rng.normal(size=(T, raw_dim)), rng.normal(size=(T, raw_dim)),
                                    rng.normal(size=(L, raw_dim))))
        n = int(rng.integers(3, 6))
        tokens = tuple(words[int(k)] for k in rng.integers(len(words), size=n))
        n_ent = int(rng.integers(1, min(config.num_queries, n) + 1))
        entities = tuple(sorted(rng.choice(n, size=n_ent, replace=False).tolist()))
        start = int(rng.integers(0, n - 1))
        record = CaptionRecord(tokens, entities, (start, start + 2))
        targets.append(caption_target(record, vocab, embedder, config.num_queries))
    elm = BigramELM(len(vocab), vocab.bos_id, vocab.eos_id).fit([t.tokens for t in targets])
    model = HMNModel(config, vocab)
    return model, make_batch(videos, targets, vocab), elm


def check_model(config: ModelConfig, train_config: TrainConfig | None = None, max_entries: int | None = 20,
                seed: int = 0, extended: bool = True, **problem) -> float:
    """Max relative gradient error of the batch objective over every parameter.

    ``max_entries`` caps the probed entries per parameter (``None`` probes all).
    The finite differences run in extended precision by default: with a loss
    around 20, float64 differences carry about 2e-10 of rounding noise, which
    swamps the many attention-weight gradients of order 1e-8.
    """
    train_config = train_config or TrainConfig()
    model, batch, elm = tiny_problem(config, seed=seed, **problem)
    use_elm = elm if train_config.lambda_soft > 0 else None
    return grad_check(lambda: batch_objective(model.losses(batch, use_elm), train_config),
                      model.parameters(), max_entries=max_entries, rng=np.random.default_rng(seed),
                      extended=extended)
