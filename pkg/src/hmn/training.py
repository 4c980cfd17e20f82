"""Optimisation loop, Adam, and the binary checkpoint format."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .config import ModelConfig, TrainConfig, split_config
from .data import Dataset
from .language import BigramELM, ToyEmbedder, Vocabulary
from .model import LOSS_NAMES, HMNModel, batch_objective, make_batch

log = logging.getLogger(__name__)

CKPT_MAGIC = b"HMNC"
CKPT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(parameters: Sequence[Parameter], gradients: Sequence[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update applied in place to ``parameters``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(parameters, gradients)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros(p.shape)
            state.v[i] = np.zeros(p.shape)
        v = state.v[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def clip_gradients(grads: list, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            if g is not None:
                g *= scale
    return total


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model: HMNModel
    train_config: TrainConfig
    epoch: int
    rng_state: dict
    history: list = field(default_factory=list)


def prepare(dataset: Dataset, config: ModelConfig) -> ModelConfig:
    """Fill the data-dependent widths of ``config`` from ``dataset``."""
    f = dataset.videos[0].features
    dims = dict(context_dim=f.context.shape[1], motion_dim=f.motion.shape[1], object_dim=f.objects.shape[1])
    for name, value in dims.items():
        given = getattr(config, name)
        if given is not None and given != value:
            raise ValueError(f"config {name}={given} but the data has width {value}")
    if config.vocab_size is not None and config.vocab_size != len(dataset.vocab):
        raise ValueError(f"config vocab_size={config.vocab_size} but the data has {len(dataset.vocab)} words")
    return replace(config, vocab_size=len(dataset.vocab), **dims)


def _buckets(dataset: Dataset, order: np.ndarray, batch_size: int) -> list[list[int]]:
    groups: dict[tuple, list[int]] = {}
    for i in order:
        f = dataset.videos[i].features
        groups.setdefault((f.T, f.L), []).append(int(i))
    batches = []
    for idx in groups.values():
        batches.extend(idx[k : k + batch_size] for k in range(0, len(idx), batch_size))
    return batches


def train(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig,
          on_epoch: Callable[[dict], None] | None = None, model: HMNModel | None = None) -> Checkpoint:
    """Fit an HMN model; deterministic given ``train_config.seed`` and ``init_seed``."""
    if len(dataset) == 0:
        raise TrainingError("cannot train on an empty dataset")
    cfg = prepare(dataset, model_config)
    model = model or HMNModel(cfg, dataset.vocab)
    embedder = ToyEmbedder(cfg.d_s, cfg.embed_seed)
    targets = dataset.targets(embedder, cfg.num_queries, cfg.max_len)
    elm = BigramELM(len(dataset.vocab), dataset.vocab.bos_id, dataset.vocab.eos_id)
    elm.fit([t.tokens for caps in targets for t in caps])
    use_elm = train_config.lambda_soft > 0

    rng = np.random.default_rng(train_config.seed)
    params = model.parameters()
    state = AdamState()
    history = []
    for epoch in range(1, train_config.epochs + 1):
        order = rng.permutation(len(dataset))
        picks = {i: int(rng.integers(len(targets[i]))) for i in order}
        sums = {name: 0.0 for name in LOSS_NAMES}
        sums["total"] = 0.0
        seen_terms: set[str] = set()
        for idx in _buckets(dataset, order, train_config.batch_size):
            batch = make_batch(
                [dataset.videos[i].features for i in idx],
                [targets[i][picks[i]] for i in idx],
                dataset.vocab,
            )
            model.zero_grad()
            comps = model.losses(batch, elm if use_elm else None)
            objective = batch_objective(comps, train_config)
            if not math.isfinite(objective.item()):
                raise TrainingError(
                    f"loss diverged at epoch {epoch}: "
                    + ", ".join(f"{k}={float(np.mean(v.data)):.4g}" for k, v in comps.items())
                )
            objective.backward()
            grads = [p.grad for p in params]
            clip_gradients(grads, train_config.clip_norm)
            adam_step(params, grads, state, train_config.learning_rate,
                      train_config.beta1, train_config.beta2, train_config.adam_eps)
            for name, value in comps.items():
                sums[name] += float(np.sum(value.data))
                seen_terms.add(name)
            sums["total"] += objective.item() * batch.size
        record = {"epoch": epoch}
        for name in LOSS_NAMES:
            if name in seen_terms:
                record[name] = sums[name] / len(dataset)
        record["total"] = sums["total"] / len(dataset)
        history.append(record)
        log.info("epoch %d %s", epoch, " ".join(f"{k}={v:.4f}" for k, v in record.items() if k != "epoch"))
        if on_epoch is not None:
            on_epoch(record)
    model.zero_grad()
    return Checkpoint(model, train_config, train_config.epochs, rng.bit_generator.state, history)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def _encode_checkpoint(ckpt: Checkpoint) -> bytes:
    model = ckpt.model
    named = list(model.named_parameters())
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(named))]
    for name, p in named:
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", p.data.ndim))
        chunks.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    meta = {
        "config": {**asdict(model.config), **asdict(ckpt.train_config)},
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "vocabulary": model.vocab.words,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(blob)))
    chunks.append(blob)
    return b"".join(chunks)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write ``"HMNC"``, u32 version, u32 count, framed float64 parameters and a
    u32-length-prefixed JSON blob with config, epoch, RNG state and vocabulary."""
    Path(path).write_bytes(_encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {buf[:4]!r}, expected {CKPT_MAGIC!r}")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != CKPT_VERSION:
            raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2 : pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            shape = struct.unpack_from(f"<{rank}I", buf, pos + 1)
            pos += 1 + 4 * rank
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * n > len(buf):
                raise CheckpointFormatError(f"{path}: parameter {name!r} is truncated")
            tensors[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
            pos += 8 * n
        (blen,) = struct.unpack_from("<I", buf, pos)
        blob = buf[pos + 4 : pos + 4 + blen]
        if len(blob) != blen:
            raise CheckpointFormatError(f"{path}: configuration blob is truncated")
        meta = json.loads(blob.decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: truncated or corrupt checkpoint ({exc})") from None

    model_config, train_config = split_config(meta["config"])
    model = HMNModel(model_config, Vocabulary.from_list(meta["vocabulary"]))
    named = dict(model.named_parameters())
    if set(named) != set(tensors):
        missing = sorted(set(named) ^ set(tensors))
        raise CheckpointFormatError(f"{path}: parameter names do not match the model: {missing[:5]}")
    for name, p in named.items():
        if p.data.shape != tensors[name].shape:
            raise CheckpointFormatError(f"{path}: parameter {name!r} has shape {tensors[name].shape}, expected {p.shape}")
        p.data[...] = tensors[name]
    return Checkpoint(model, train_config, meta["epoch"], meta["rng_state"])
