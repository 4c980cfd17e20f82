"""Whole-dataset measurements of a trained model."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .decoder import beam_search, greedy_decode
from .language import BigramELM, ToyEmbedder
from .matching import cost_matrix, hungarian
from .metrics import EvalCorpus
from .model import HMNModel, make_batch


def _targets(model: HMNModel, dataset: Dataset):
    cfg = model.config
    return dataset.targets(ToyEmbedder(cfg.d_s, cfg.embed_seed), cfg.num_queries, cfg.max_len)


def per_token_xent(model: HMNModel, dataset: Dataset, batch_size: int = 64) -> float:
    """Teacher-forced cross-entropy per gold token (end marker included), first caption per video."""
    targets = _targets(model, dataset)
    total = 0.0
    tokens = 0
    with ad.no_grad():
        for k in range(0, len(dataset), batch_size):
            idx = range(k, min(k + batch_size, len(dataset)))
            batch = make_batch([dataset.videos[i].features for i in idx],
                               [targets[i][0] for i in idx], dataset.vocab)
            enc = model.encode(batch)
            lp = model.decoder.teacher_forced(enc, batch.inputs).data
            gold = np.take_along_axis(lp, batch.outputs[..., None], axis=-1)[..., 0]
            total -= float(np.sum(gold * batch.mask))
            tokens += batch.n_tokens
    return total / tokens


def decode_dataset(model: HMNModel, dataset: Dataset, beam: int = 1, max_len: int | None = None) -> dict:
    """Caption ids per video id; ``beam == 1`` uses greedy decoding."""
    max_len = max_len or model.config.max_len
    out = {}
    for v in dataset.videos:
        if beam == 1:
            out[v.id] = greedy_decode(model, v.features, max_len=max_len)
        else:
            out[v.id] = beam_search(model, v.features, beam=beam, max_len=max_len)
    return out


def caption_corpus(model: HMNModel, dataset: Dataset, decoded: dict) -> EvalCorpus:
    vocab = model.vocab
    cands = {vid: tuple(vocab.decode(ids)) for vid, ids in decoded.items()}
    refs = {v.id: [tuple(c.tokens) for c in v.captions] for v in dataset.videos}
    return EvalCorpus(cands, refs)


def exact_match_rate(model: HMNModel, dataset: Dataset, decoded: dict) -> float:
    hits = 0
    for v in dataset.videos:
        words = tuple(model.vocab.decode(decoded[v.id]))
        hits += any(words == tuple(c.tokens) for c in v.captions)
    return hits / len(dataset)


def selection_accuracy(model: HMNModel, dataset: Dataset, entity_words) -> float:
    """Share of (video, real entity) pairs whose matched prediction's nearest
    entity-word embedding is the right word.

    Every entity tagged in the first caption counts, including those that do
    not fit into the query slots; those are scored as misses.
    """
    cfg = model.config
    embedder = ToyEmbedder(cfg.d_s, cfg.embed_seed)
    words = list(entity_words)
    bank = np.stack([embedder.word_vector(w) for w in words])
    targets = _targets(model, dataset)
    hits = total = 0
    with ad.no_grad():
        for v, caps in zip(dataset.videos, targets):
            tgt = caps[0]
            total += len(tgt.entity_words)
            if tgt.entities.count == 0:
                continue
            batch = make_batch([v.features], [tgt], dataset.vocab)
            E_bar = model.encode(batch).E_bar.data[0]
            sigma = hungarian(cost_matrix(tgt.entities, E_bar)).sigma
            for i, word in enumerate(tgt.entity_words[: tgt.entities.size]):
                e = E_bar[sigma[i]]
                sims = bank @ e / np.linalg.norm(e)
                hits += words[int(np.argmax(sims))] == word
    return hits / total if total else 0.0


def soft_target_xent_floor(dataset: Dataset, lambda_soft: float) -> float:
    """Lowest per-token cross-entropy reachable while the soft-target term is on.

    Per step, ``-log P[w] + lambda * KL(Q || P)`` is minimised over the simplex
    by ``P = (onehot(w) + lambda Q) / (1 + lambda)``, so the gold token can
    get at most ``(1 + lambda Q[w]) / (1 + lambda)``.
    """
    vocab = dataset.vocab
    captions = [vocab.encode(v.captions[0].tokens) for v in dataset.videos]
    elm = BigramELM(len(vocab), vocab.bos_id, vocab.eos_id).fit(
        [vocab.encode(c.tokens) for v in dataset.videos for c in v.captions]
    )
    losses = []
    for ids in captions:
        seq = [vocab.bos_id, *ids, vocab.eos_id]
        for prev, gold in zip(seq[:-1], seq[1:]):
            q = elm.conditional(prev)[gold]
            losses.append(-np.log((1.0 + lambda_soft * q) / (1.0 + lambda_soft)))
    return float(np.mean(losses))
