"""The captioning model: encoder, decoder and the loss terms for a batch."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig, TrainConfig
from .decoder import CaptionDecoder, soft_target_from_log_probs, xent_from_log_probs
from .encoder import (
    CaptionTarget,
    EncodedVideo,
    HMNEncoder,
    VideoFeatures,
    predicate_loss,
    sentence_loss,
    stack_features,
)
from .language import BigramELM, Vocabulary
from .layers import Module
from .matching import batched_entity_loss

LOSS_NAMES = ("L_e", "L_p", "L_s", "L_XE", "L_soft")


@dataclass
class Batch:
    context: np.ndarray     # (B, T, d_c)
    motion: np.ndarray      # (B, T, d_m)
    objects: np.ndarray     # (B, L, d_o)
    targets: list           # CaptionTarget per video
    inputs: np.ndarray      # (B, S) <bos> w_1 .. w_n <pad>..
    outputs: np.ndarray     # (B, S) w_1 .. w_n <eos> <pad>..
    mask: np.ndarray        # (B, S) 1.0 on real steps

    @property
    def size(self) -> int:
        return self.context.shape[0]

    @property
    def n_tokens(self) -> int:
        return int(self.mask.sum())


def make_batch(videos: list[VideoFeatures], targets: list[CaptionTarget], vocab: Vocabulary) -> Batch:
    context, motion, objects = stack_features(videos)
    S = max(len(t.tokens) for t in targets) + 1
    B = len(targets)
    inputs = np.full((B, S), vocab.pad_id, dtype=np.int64)
    outputs = np.full((B, S), vocab.pad_id, dtype=np.int64)
    mask = np.zeros((B, S))
    for b, t in enumerate(targets):
        n = len(t.tokens)
        inputs[b, 0] = vocab.bos_id
        inputs[b, 1 : n + 1] = t.tokens
        outputs[b, :n] = t.tokens
        outputs[b, n] = vocab.eos_id
        mask[b, : n + 1] = 1.0
    return Batch(context, motion, objects, list(targets), inputs, outputs, mask)


class HMNModel(Module):
    def __init__(self, config: ModelConfig, vocab: Vocabulary):
        if config.vocab_size is None:
            config = replace(config, vocab_size=len(vocab))
        elif config.vocab_size != len(vocab):
            raise ValueError(f"config vocab_size {config.vocab_size} != vocabulary size {len(vocab)}")
        self.config = config
        self.vocab = vocab
        rng = np.random.default_rng(config.init_seed)
        self.encoder = HMNEncoder(config, rng)
        self.decoder = CaptionDecoder(config, rng)
        self.assign_names()

    def encode(self, batch: Batch) -> EncodedVideo:
        return self.encoder(batch.context, batch.motion, batch.objects)

    def losses(self, batch: Batch, elm: BigramELM | None) -> dict[str, Tensor]:
        """Per-video loss components, each of shape ``(B,)``; disabled terms are absent."""
        cfg = self.config
        enc = self.encode(batch)
        out: dict[str, Tensor] = {}
        if not (cfg.no_entity or cfg.all_objects):
            out["L_e"] = batched_entity_loss([t.entities for t in batch.targets], enc.E_bar)
        if not cfg.no_predicate:
            out["L_p"] = predicate_loss(enc.a_bar, np.stack([t.predicate for t in batch.targets]))
        if not cfg.no_sentence:
            out["L_s"] = sentence_loss(enc.g_bar, np.stack([t.sentence for t in batch.targets]))
        log_probs = self.decoder.teacher_forced(enc, batch.inputs)
        out["L_XE"] = xent_from_log_probs(log_probs, batch.outputs, batch.mask)
        if elm is not None:
            out["L_soft"] = soft_target_from_log_probs(
                log_probs, elm.soft_targets(batch.inputs), batch.mask
            )
        return out


def total_loss(L_e, L_p, L_s, L_XE, L_soft, config: TrainConfig):
    """``l_e L_e + l_p L_p + l_s L_s + L_XE + l_soft L_soft``; ``None`` terms are skipped."""
    parts = [(L_e, config.lambda_e), (L_p, config.lambda_p), (L_s, config.lambda_s),
             (L_XE, 1.0), (L_soft, config.lambda_soft)]
    total = None
    for value, weight in parts:
        if value is None:
            continue
        v = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise ad.NonFiniteError("non-finite loss component")
        term = value * weight
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no loss components")
    return total


def batch_objective(components: dict[str, Tensor], config: TrainConfig) -> Tensor:
    """Mean over the batch of the per-video total loss."""
    per_video = total_loss(*(components.get(n) for n in LOSS_NAMES), config=config)
    return ad.mean(per_video)
