"""Text-side supervision: a seeded word embedder and a bigram language model."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .matching import PaddedEntitySet

BOS = "<bos>"
EOS = "<eos>"
PAD = "<pad>"
UNK = "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)


class Vocabulary:
    """Bidirectional word/id map; the special markers always take ids 0-3."""

    def __init__(self, words: Sequence[str] = ()):
        self.words: list[str] = list(SPECIALS)
        self.index = {w: i for i, w in enumerate(self.words)}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        if word not in self.index:
            self.index[word] = len(self.words)
            self.words.append(word)
        return self.index[word]

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word) -> bool:
        return word in self.index

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        unk = self.index[UNK]
        return [self.index.get(t, unk) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.words[i] for i in ids]

    @classmethod
    def from_list(cls, words: Sequence[str]) -> "Vocabulary":
        if tuple(words[: len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        return cls(words[len(SPECIALS):])


@dataclass(frozen=True)
class ToyEmbedder:
    """Seeded unit vectors per word; a phrase is the renormalised mean.

    Vectors depend only on ``(word, seed)``, so separate processes agree
    bit for bit.
    """

    dim: int
    seed: int = 0

    def word_vector(self, word: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}\x00{word}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        vec = rng.standard_normal(self.dim)
        return vec / np.linalg.norm(vec)

    def embed_phrase(self, tokens: Sequence[str]) -> np.ndarray:
        if len(tokens) == 0:
            raise ValueError("cannot embed an empty phrase")
        mean = np.mean([self.word_vector(t) for t in tokens], axis=0)
        n = np.linalg.norm(mean)
        if n == 0:
            raise ValueError(f"phrase {list(tokens)!r} has a zero mean embedding")
        return mean / n


def extract_supervision(
    tokens: Sequence[str],
    entity_indices: Sequence[int],
    predicate_span: tuple[int, int],
    embedder: ToyEmbedder,
    n_slots: int,
) -> tuple[PaddedEntitySet, np.ndarray, np.ndarray]:
    """Entity set, predicate embedding and sentence embedding for one caption."""
    n = len(tokens)
    start, end = predicate_span
    if not 0 <= start < end <= n:
        raise ValueError(f"predicate span {predicate_span} outside caption of length {n}")
    for i in entity_indices:
        if not 0 <= i < n:
            raise ValueError(f"entity index {i} outside caption of length {n}")
    entities = PaddedEntitySet.pad(
        [embedder.word_vector(tokens[i]) for i in entity_indices], n_slots, embedder.dim
    )
    return entities, embedder.embed_phrase(tokens[start:end]), embedder.embed_phrase(tokens)


class BigramELM:
    """Laplace-smoothed bigram model supplying soft targets for the decoder."""

    def __init__(self, vocab_size: int, bos_id: int = 1, eos_id: int = 2, smoothing: float = 1.0):
        self.vocab_size = vocab_size
        self.bos_id = bos_id
        self.eos_id = eos_id
        self.smoothing = smoothing
        self.counts = np.zeros((vocab_size, vocab_size))
        self.fitted = False

    def fit(self, captions: Sequence[Sequence[int]]) -> "BigramELM":
        """Count transitions ``<bos> w_1 ... w_n <eos>`` over caption id lists."""
        for ids in captions:
            seq = [self.bos_id, *ids, self.eos_id]
            np.add.at(self.counts, (seq[:-1], seq[1:]), 1.0)
        self.fitted = True
        return self

    def conditional(self, previous: int) -> np.ndarray:
        row = self.counts[previous] + self.smoothing
        return row / row.sum()

    def distribution(self, prefix: Sequence[int]) -> np.ndarray:
        if not self.fitted:
            raise RuntimeError("BigramELM.fit must be called before use")
        return self.conditional(prefix[-1] if len(prefix) else self.bos_id)

    def soft_targets(self, inputs: np.ndarray) -> np.ndarray:
        """Distributions for every teacher-forced input id, shape ``inputs.shape + (D,)``."""
        if not self.fitted:
            raise RuntimeError("BigramELM.fit must be called before use")
        rows = self.counts + self.smoothing
        table = rows / rows.sum(axis=1, keepdims=True)
        return table[np.asarray(inputs)]


def elm_distribution(model: BigramELM, prefix: Sequence[int]) -> np.ndarray:
    return model.distribution(prefix)
