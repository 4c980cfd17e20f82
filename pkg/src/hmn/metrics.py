"""Corpus-level caption metrics: BLEU@4, ROUGE-L and CIDEr.

A corpus is a mapping (or sequence of pairs) from video id to
``(candidate_tokens, [reference_tokens, ...])``.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np


@dataclass(frozen=True)
class EvalCorpus:
    candidates: dict
    references: dict

    def __post_init__(self):
        if set(self.candidates) != set(self.references):
            raise ValueError("candidates and references must cover the same videos")
        for vid, refs in self.references.items():
            if len(refs) == 0:
                raise ValueError(f"video {vid!r} has no references")

    def __len__(self):
        return len(self.candidates)

    def items(self):
        for vid in sorted(self.candidates):
            yield vid, list(self.candidates[vid]), [list(r) for r in self.references[vid]]

    @classmethod
    def from_pairs(cls, pairs: Mapping | Sequence) -> "EvalCorpus":
        items = pairs.items() if isinstance(pairs, Mapping) else enumerate(pairs)
        cands, refs = {}, {}
        for vid, (cand, rs) in items:
            cands[vid] = tuple(cand)
            refs[vid] = [tuple(r) for r in rs]
        return cls(cands, refs)


def tokenize(text: str) -> list[str]:
    """Lowercase and strip punctuation."""
    return re.sub(r"[^\w\s]", " ", text.lower()).split()


def _corpus(corpus) -> EvalCorpus:
    c = corpus if isinstance(corpus, EvalCorpus) else EvalCorpus.from_pairs(corpus)
    if len(c) == 0:
        raise ValueError("empty corpus")
    return c


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(corpus) -> float:
    """Corpus BLEU with n = 1..4, closest-reference brevity penalty.

    Precisions for n >= 2 use add-one smoothing on both the clipped match
    count and the candidate n-gram count; unigram precision is unsmoothed.
    """
    c = _corpus(corpus)
    matches = [0] * 4
    totals = [0] * 4
    cand_len = ref_len = 0
    for _, cand, refs in c.items():
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, 5):
            counts = _ngrams(cand, n)
            max_ref: Counter = Counter()
            for r in refs:
                max_ref |= _ngrams(r, n)
            matches[n - 1] += sum(min(k, max_ref[g]) for g, k in counts.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    if cand_len == 0 or matches[0] == 0:
        return 0.0
    log_p = math.log(matches[0] / totals[0])
    for n in range(1, 4):
        log_p += math.log((matches[n] + 1) / (totals[n] + 1))
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p / 4)


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(cand: Sequence, refs: Sequence[Sequence], beta: float = 1.2) -> float:
    best = 0.0
    for r in refs:
        lcs = lcs_length(cand, r)
        if lcs == 0:
            continue
        p, rec = lcs / len(cand), lcs / len(r)
        f = (1 + beta ** 2) * p * rec / (rec + beta ** 2 * p)
        best = max(best, f)
    return best


def rouge_l(corpus, beta: float = 1.2) -> float:
    """Mean over videos of the best LCS F-measure against any reference."""
    c = _corpus(corpus)
    return float(np.mean([rouge_l_sentence(cand, refs, beta) for _, cand, refs in c.items()]))


def cider_scores(corpus, n_max: int = 4) -> dict:
    """Per-video plain CIDEr (no clipping or length penalty), scaled by 10.

    Document frequencies come from the references: an n-gram's frequency is
    the number of videos whose reference set contains it.
    """
    c = _corpus(corpus)
    items = list(c.items())
    n_docs = len(items)
    df: list[Counter] = [Counter() for _ in range(n_max)]
    for _, _, refs in items:
        for n in range(1, n_max + 1):
            seen = set()
            for r in refs:
                seen.update(_ngrams(r, n))
            df[n - 1].update(seen)

    def vector(tokens, n):
        counts = _ngrams(tokens, n)
        total = sum(counts.values())
        return {
            g: (k / total) * math.log(n_docs / max(1.0, df[n - 1][g]))
            for g, k in counts.items()
        }

    def cosine(a: dict, b: dict) -> float:
        na = math.sqrt(sum(x * x for x in a.values()))
        nb = math.sqrt(sum(x * x for x in b.values()))
        if na == 0 or nb == 0:
            return 0.0
        return sum(x * b.get(g, 0.0) for g, x in a.items()) / (na * nb)

    scores = {}
    for vid, cand, refs in items:
        per_n = []
        for n in range(1, n_max + 1):
            cv = vector(cand, n)
            per_n.append(np.mean([cosine(cv, vector(r, n)) for r in refs]))
        scores[vid] = 10.0 * float(np.mean(per_n))
    return scores


def cider(corpus) -> float:
    return float(np.mean(list(cider_scores(corpus).values())))


def evaluate(corpus) -> dict:
    c = _corpus(corpus)
    return {"bleu4": round(bleu4(c), 6), "rouge_l": round(rouge_l(c), 6), "cider": round(cider(c), 6)}
