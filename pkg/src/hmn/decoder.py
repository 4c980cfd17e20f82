"""LSTM caption generator with attentive fusion, losses and decoding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .config import ModelConfig
from .encoder import EncodedVideo
from .layers import AdditiveAttention, Linear, LSTMCell, Module, _uniform


@dataclass
class DecoderState:
    h: Tensor
    c: Tensor
    t: int = 1


@dataclass
class FusedInputs:
    g_hat: Tensor
    a_hat: Tensor
    e_hat: Tensor
    weights: dict


class CaptionDecoder(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        if config.vocab_size is None:
            raise ValueError("vocab_size must be set before building the decoder")
        c = config
        self.config = c
        self.vocab_size = c.vocab_size
        self.word_embedding = Parameter(_uniform(rng, c.d_w, (c.vocab_size, c.d_w)))
        self.global_attention = AdditiveAttention(c.d_hidden, c.d_model, c.d_att, rng)
        self.action_attention = AdditiveAttention(c.d_hidden, c.d_model, c.d_att, rng)
        self.object_attention = AdditiveAttention(c.d_hidden, c.d_model, c.d_att, rng)
        self.entity_attention = AdditiveAttention(c.d_hidden, c.d_s, c.d_att, rng)
        width = 3 * (c.d_model + c.d_s) + c.d_w
        self.lstm = LSTMCell(width, c.d_hidden, rng)
        self.output = Linear(c.d_hidden, c.vocab_size, rng)

    def initial_state(self, batch: int) -> DecoderState:
        h, c = self.lstm.zero_state(batch)
        return DecoderState(h, c, 1)

    def prepare(self, enc: EncodedVideo) -> dict:
        """Key projections that stay fixed over all decoding steps."""
        return {
            "G": self.global_attention.project_keys(enc.G),
            "A": self.action_attention.project_keys(enc.A),
            "E": self.object_attention.project_keys(enc.E),
            "E_bar": self.entity_attention.project_keys(enc.E_bar),
        }

    def fuse_step(self, h_prev: Tensor, enc: EncodedVideo, keys: dict | None = None) -> FusedInputs:
        cfg = self.config
        keys = keys if keys is not None else self.prepare(enc)
        B = h_prev.shape[0]
        q = ad.reshape(h_prev, (B, 1, -1))
        weights = {}

        def summary(name, attn, values):
            w, s = attn.attend(q, keys[name], values)
            weights[name] = w.data[:, 0]
            return ad.reshape(s, (B, values.shape[-1]))

        def expand(t: Tensor):
            return t if t.shape[0] == B else t + ad.zeros((B,) + t.shape[1:])

        if cfg.no_sentence:
            g_hat = ad.zeros((B, cfg.d_model + cfg.d_s))
        else:
            g_hat = ad.concat([summary("G", self.global_attention, enc.G), expand(enc.g_bar)], axis=-1)
        if cfg.no_predicate:
            a_hat = ad.zeros((B, cfg.d_model + cfg.d_s))
        else:
            a_hat = ad.concat([summary("A", self.action_attention, enc.A), expand(enc.a_bar)], axis=-1)
        if cfg.no_entity:
            e_hat = ad.zeros((B, cfg.d_model + cfg.d_s))
        else:
            e_hat = ad.concat(
                [summary("E", self.object_attention, enc.E),
                 summary("E_bar", self.entity_attention, enc.E_bar)],
                axis=-1,
            )
        return FusedInputs(g_hat, a_hat, e_hat, weights)

    def decode_step(self, prev_ids, state: DecoderState, fused: FusedInputs):
        """One LSTM step; returns the new state and log-probabilities ``(B, D)``."""
        prev_ids = np.asarray(prev_ids, dtype=np.int64)
        if prev_ids.min() < 0 or prev_ids.max() >= self.vocab_size:
            raise IndexError(f"word id outside vocabulary of size {self.vocab_size}")
        word = ad.embedding_lookup(self.word_embedding, prev_ids)
        x = ad.concat([fused.g_hat, fused.a_hat, fused.e_hat, word], axis=-1)
        h, c = self.lstm(x, (state.h, state.c))
        log_probs = ad.log_softmax(self.output(h), axis=-1)
        return DecoderState(h, c, state.t + 1), log_probs

    def step(self, prev_ids, state: DecoderState, enc: EncodedVideo, keys: dict):
        fused = self.fuse_step(state.h, enc, keys)
        return self.decode_step(prev_ids, state, fused)

    def teacher_forced(self, enc: EncodedVideo, inputs: np.ndarray) -> Tensor:
        """Log-probabilities ``(B, S, D)`` for gold input ids ``(B, S)``."""
        B, S = inputs.shape
        keys = self.prepare(enc)
        state = self.initial_state(B)
        out = []
        for t in range(S):
            state, lp = self.step(inputs[:, t], state, enc, keys)
            out.append(lp)
        return ad.stack(out, axis=1)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def xent_from_log_probs(log_probs: Tensor, targets, mask=None) -> Tensor:
    """``-sum_t log P_t[w_t]`` over the step axis; batched inputs give ``(B,)``."""
    targets = np.asarray(targets, dtype=np.int64)
    if log_probs.shape[:-1] != targets.shape:
        raise ValueError(f"{log_probs.shape[:-1]} steps of distributions for {targets.shape} tokens")
    onehot = np.zeros(log_probs.shape)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    if mask is not None:
        onehot *= np.asarray(mask, dtype=np.float64)[..., None]
    return -ad.tsum(ad.tsum(log_probs * onehot, axis=-1), axis=-1)


def xent_loss(distributions, tokens, mask=None) -> Tensor:
    """Cross-entropy of per-step distributions ``(..., S, D)`` against gold ids."""
    P = distributions if isinstance(distributions, Tensor) else ad.stack(list(distributions))
    return xent_from_log_probs(ad.log(P), tokens, mask)


def soft_target_from_log_probs(log_probs: Tensor, Q, mask=None) -> Tensor:
    Q = np.asarray(Q, dtype=np.float64)
    if np.any(Q <= 0):
        raise ValueError("soft targets must be strictly positive")
    if np.any(~np.isfinite(log_probs.data)):
        raise ValueError("model distribution has zero-probability entries")
    weights = Q if mask is None else Q * np.asarray(mask, dtype=np.float64)[..., None]
    entropy_term = np.sum(weights * np.log(Q), axis=(-1, -2))
    return entropy_term - ad.tsum(ad.tsum(log_probs * weights, axis=-1), axis=-1)


def soft_target_loss(P, Q, mask=None) -> Tensor:
    """``sum_t KL(Q_t || P_t)``; both inputs must be strictly positive."""
    P = P if isinstance(P, Tensor) else Tensor(P)
    if np.any(P.data <= 0):
        raise ValueError("model distribution has zero-probability entries")
    if P.ndim == 1:
        P = ad.reshape(P, (1, -1))
        Q = np.asarray(Q, dtype=np.float64).reshape(1, -1)
    return soft_target_from_log_probs(ad.log(P), Q, mask)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

@dataclass
class Hypothesis:
    tokens: tuple
    log_prob: float
    finished: bool

    @property
    def length(self) -> int:
        return max(len(self.tokens), 1)

    @property
    def score(self) -> float:
        return self.log_prob / self.length


def length_normalized(h: Hypothesis) -> float:
    return h.score


def _next_word_scores(lp: Tensor, vocab) -> np.ndarray:
    # padding and the start marker are never valid outputs
    scores = lp.data.copy()
    scores[:, [vocab.pad_id, vocab.bos_id]] = -np.inf
    return scores


def _decoder_inputs(model, features):
    from .encoder import encode_video

    with ad.no_grad():
        enc = encode_video(features, model.encoder)
    return enc


def greedy_decode(model, features, max_len: int = 20, return_hypothesis: bool = False):
    """Argmax decoding; ties go to the lowest word id."""
    dec: CaptionDecoder = model.decoder
    eos, bos = model.vocab.eos_id, model.vocab.bos_id
    with ad.no_grad():
        enc = _decoder_inputs(model, features)
        keys = dec.prepare(enc)
        state = dec.initial_state(1)
        prev = bos
        tokens: list[int] = []
        total = 0.0
        finished = False
        for _ in range(max_len + 1):
            state, lp = dec.step(np.array([prev]), state, enc, keys)
            scores = _next_word_scores(lp, model.vocab)[0]
            word = int(np.argmax(scores))
            total += float(scores[word])
            tokens.append(word)
            if word == eos:
                finished = True
                break
            if len(tokens) >= max_len:
                break
            prev = word
    hyp = Hypothesis(tuple(tokens), total, finished)
    return hyp if return_hypothesis else _strip(hyp, eos)


def _strip(h: Hypothesis, eos: int) -> list[int]:
    return list(h.tokens[:-1]) if h.finished else list(h.tokens)


def beam_search(model, features, beam: int = 5, max_len: int = 20, return_hypothesis: bool = False):
    """Beam search returning the best finished hypothesis by length-normalised log-prob.

    Each step keeps the ``beam`` best extensions of the live hypotheses;
    extensions that emit the end marker are set aside as finished.  When
    hypotheses reach ``max_len`` words without finishing they are kept as
    they are.  Ties break toward the lexicographically smaller token ids.
    """
    if beam < 1:
        raise ValueError("beam width must be at least 1")
    dec: CaptionDecoder = model.decoder
    eos, bos = model.vocab.eos_id, model.vocab.bos_id
    with ad.no_grad():
        enc = _decoder_inputs(model, features)
        keys = dec.prepare(enc)
        # each hypothesis is stepped as its own batch of one, so a prefix
        # scores bitwise the same as under greedy decoding
        live = [(Hypothesis((), 0.0, False), dec.initial_state(1))]
        done: list[Hypothesis] = []
        while live:
            candidates = []
            for k, (h, state) in enumerate(live):
                prev = np.array([h.tokens[-1] if h.tokens else bos])
                new_state, lp = dec.step(prev, state, enc, keys)
                logp = _next_word_scores(lp, model.vocab)[0]
                for w in np.flatnonzero(np.isfinite(logp)):
                    candidates.append((h.log_prob + float(logp[w]), h.tokens + (int(w),), new_state))
            candidates.sort(key=lambda c: (-c[0], c[1]))
            live = []
            for score, toks, new_state in candidates[:beam]:
                if toks[-1] == eos:
                    done.append(Hypothesis(toks, score, True))
                elif len(toks) >= max_len:
                    done.append(Hypothesis(toks, score, False))
                else:
                    live.append((Hypothesis(toks, score, False), new_state))
        best = min(done, key=lambda h: (-h.score, h.tokens))
    return best if return_hypothesis else _strip(best, eos)
