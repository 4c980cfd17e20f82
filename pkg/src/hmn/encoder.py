"""The three-level video encoder: entity, predicate and sentence modules.

Shapes use B for batch, T for time steps, L for detected objects and N for
entity-query slots.  Every method takes batched tensors; the module-level
functions at the bottom are single-video conveniences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .config import ModelConfig
from .layers import (
    AdditiveAttention,
    BiLSTM,
    Linear,
    Module,
    TransformerDecoder,
    TransformerEncoder,
)
from .matching import PaddedEntitySet


@dataclass(frozen=True)
class VideoFeatures:
    """Raw per-video features: context ``(T, d_c)``, motion ``(T, d_m)``, objects ``(L, d_o)``."""

    context: np.ndarray
    motion: np.ndarray
    objects: np.ndarray

    def __post_init__(self):
        for name in ("context", "motion", "objects"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2 or arr.shape[0] == 0:
                raise ValueError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite values")
            object.__setattr__(self, name, arr)
        if self.context.shape[0] != self.motion.shape[0]:
            raise ValueError(
                f"context and motion disagree on T: {self.context.shape[0]} vs {self.motion.shape[0]}"
            )

    @property
    def T(self) -> int:
        return self.context.shape[0]

    @property
    def L(self) -> int:
        return self.objects.shape[0]


@dataclass(frozen=True)
class CaptionTarget:
    """Token ids (no markers) plus the linguistic supervision of one caption."""

    tokens: tuple
    entities: PaddedEntitySet
    predicate: np.ndarray
    sentence: np.ndarray
    entity_words: tuple = ()


@dataclass
class EncodedVideo:
    """Encoder outputs for a batch.  Tensors carry a leading batch axis."""

    E: Tensor          # (B, N, d_model) principal objects
    E_bar: Tensor      # (B, N, d_s)
    A: Tensor          # (B, T, d_model) actions
    a_bar: Tensor      # (B, d_s)
    G: Tensor          # (B, T, d_model) global features
    g_bar: Tensor      # (B, d_s)
    v: Tensor          # (B, d_model) video content vector
    extras: dict = field(default_factory=dict)

    FIELDS = ("E", "E_bar", "A", "a_bar", "G", "g_bar", "v")


def stack_features(videos: list[VideoFeatures]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    shapes = {(v.context.shape, v.motion.shape, v.objects.shape) for v in videos}
    if len(shapes) != 1:
        raise ValueError(f"videos in one batch must share shapes, got {sorted(shapes)}")
    return (
        np.stack([v.context for v in videos]),
        np.stack([v.motion for v in videos]),
        np.stack([v.objects for v in videos]),
    )


def _zeros_like(t: Tensor) -> Tensor:
    return ad.zeros(t.shape)


class HMNEncoder(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        if None in (config.context_dim, config.motion_dim, config.object_dim):
            raise ValueError("raw feature widths must be set before building the encoder")
        c = config
        d = c.d_model
        self.config = c
        self.context_proj = Linear(c.context_dim, d, rng)
        self.motion_proj = Linear(c.motion_dim, d, rng)
        self.object_proj = Linear(c.object_dim, d, rng)
        # entity module
        self.content_lstm = BiLSTM(2 * d, d, rng)
        self.object_encoder = TransformerEncoder(d, c.num_heads, c.encoder_layers, rng, c.ffn_mult)
        self.object_decoder = TransformerDecoder(d, c.num_heads, c.decoder_layers, rng, c.ffn_mult)
        self.queries = Parameter(rng.normal(0.0, 0.02, size=(c.num_queries, d)))
        self.entity_head = Linear(d, c.d_s, rng)
        # predicate module
        self.motion_attention = AdditiveAttention(d, d, c.d_att, rng)
        self.action_lstm = BiLSTM(2 * d, d, rng)
        self.predicate_head = Linear(d, c.d_s, rng)
        # sentence module
        self.context_action_attention = AdditiveAttention(d, d, c.d_att, rng)
        self.context_object_attention = AdditiveAttention(d, d, c.d_att, rng)
        self.global_lstm = BiLSTM(3 * d, d, rng)
        self.sentence_head = Linear(d, c.d_s, rng)

    # -- steps -------------------------------------------------------------
    def project(self, context, motion, objects):
        return (
            self.context_proj(ad.as_tensor(context)),
            self.motion_proj(ad.as_tensor(motion)),
            self.object_proj(ad.as_tensor(objects)),
        )

    def video_content_vector(self, C: Tensor, M: Tensor) -> Tensor:
        if C.shape[1] != M.shape[1]:
            raise ValueError(f"context and motion disagree on T: {C.shape} vs {M.shape}")
        H = self.content_lstm(ad.concat([C, M], axis=-1))
        return ad.pool_max_over_time(H)

    def encode_entities(self, O: Tensor, v: Tensor | None) -> tuple[Tensor, Tensor]:
        memory = self.object_encoder(O)
        E = self.object_decoder(memory, self.queries, None if self.config.no_content_query else v)
        return E, self.entity_head(E)

    def motion_related_objects(self, M: Tensor, E: Tensor):
        return self.motion_attention(M, E, E)

    def encode_actions(self, M: Tensor, Me: Tensor) -> Tensor:
        if M.shape[1] != Me.shape[1]:
            raise ValueError("motion and motion-related objects disagree on T")
        return self.action_lstm(ad.concat([M, Me], axis=-1))

    def context_related_features(self, C: Tensor, A: Tensor, E: Tensor):
        beta, Ca = self.context_action_attention(C, A, A)
        rho, Ce = self.context_object_attention(C, E, E)
        return Ca, Ce, beta, rho

    def encode_global(self, C: Tensor, Ca: Tensor, Ce: Tensor) -> Tensor:
        if not C.shape[1] == Ca.shape[1] == Ce.shape[1]:
            raise ValueError("sentence-module inputs disagree on T")
        return self.global_lstm(ad.concat([C, Ca, Ce], axis=-1))

    # -- full chain ----------------------------------------------------------
    def __call__(self, context, motion, objects) -> EncodedVideo:
        cfg = self.config
        C, M, O = self.project(context, motion, objects)
        v = self.video_content_vector(C, M)
        extras: dict = {}

        if cfg.no_entity:
            n = O.shape[1] if cfg.all_objects else cfg.num_queries
            E = ad.zeros((O.shape[0], n, cfg.d_model))
            E_bar = ad.zeros((O.shape[0], n, cfg.d_s))
        elif cfg.all_objects:
            E = O
            E_bar = self.entity_head(E)
        else:
            E, E_bar = self.encode_entities(O, v)

        if cfg.no_entity or cfg.cut_e2p:
            Me = _zeros_like(M)
        else:
            alpha, Me = self.motion_related_objects(M, E)
            extras["alpha"] = alpha.data

        if cfg.no_predicate:
            A = _zeros_like(M)
            a_bar = ad.zeros((M.shape[0], cfg.d_s))
        else:
            A = self.encode_actions(M, Me)
            a_bar = self.predicate_head(ad.pool_max_over_time(A))

        if cfg.no_sentence:
            G = _zeros_like(C)
            g_bar = ad.zeros((C.shape[0], cfg.d_s))
        else:
            Ca = _zeros_like(C)
            Ce = _zeros_like(C)
            if not (cfg.no_predicate or cfg.cut_p2s):
                beta, Ca = self.context_action_attention(C, A, A)
                extras["beta"] = beta.data
            if not (cfg.no_entity or cfg.cut_e2s):
                rho, Ce = self.context_object_attention(C, E, E)
                extras["rho"] = rho.data
            G = self.encode_global(C, Ca, Ce)
            g_bar = self.sentence_head(ad.pool_max_over_time(G))

        return EncodedVideo(E=E, E_bar=E_bar, A=A, a_bar=a_bar, G=G, g_bar=g_bar, v=v, extras=extras)


def predicate_loss(a_bar: Tensor, p) -> Tensor:
    """``1 - cos(p, a_bar)`` along the trailing axis."""
    return ad.cosine_distance(ad.as_tensor(p), a_bar)


def sentence_loss(g_bar: Tensor, s) -> Tensor:
    return ad.cosine_distance(ad.as_tensor(s), g_bar)


def _batch1(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)[None]


def encode_video(features: VideoFeatures, encoder: HMNEncoder) -> EncodedVideo:
    """Encode one video; the result keeps a batch axis of size 1."""
    return encoder(_batch1(features.context), _batch1(features.motion), _batch1(features.objects))
