"""Model and training configuration, loadable from a flat JSON object."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 512
    d_s: int = 768
    d_w: int = 300
    d_hidden: int = 512       # caption LSTM width
    d_att: int = 512          # additive-attention hidden width
    num_queries: int = 8
    num_heads: int = 8
    encoder_layers: int = 2
    decoder_layers: int = 2
    ffn_mult: int = 4
    # raw feature widths; None means "take them from the data at fit time"
    context_dim: int | None = None
    motion_dim: int | None = None
    object_dim: int | None = None
    vocab_size: int | None = None
    max_len: int = 20
    beam: int = 5
    init_seed: int = 0
    embed_seed: int = 0
    # ablations
    no_entity: bool = False
    no_predicate: bool = False
    no_sentence: bool = False
    cut_e2p: bool = False
    cut_e2s: bool = False
    cut_p2s: bool = False
    all_objects: bool = False
    no_content_query: bool = False

    def __post_init__(self):
        if self.d_model % 2:
            raise ConfigError("d_model must be even (two BiLSTM halves)")
        if self.d_model % self.num_heads:
            raise ConfigError("num_heads must divide d_model")
        for name in ("d_model", "d_s", "d_w", "d_hidden", "d_att", "num_queries", "num_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.max_len < 1 or self.beam < 1:
            raise ConfigError("max_len and beam must be positive")


@dataclass(frozen=True)
class TrainConfig:
    lambda_e: float = 0.6
    lambda_p: float = 0.3
    lambda_s: float = 1.0
    lambda_soft: float = 0.5
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    clip_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name in ("lambda_e", "lambda_p", "lambda_s", "lambda_soft"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")


_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def split_config(values: dict) -> tuple[ModelConfig, TrainConfig]:
    unknown = sorted(set(values) - _MODEL_KEYS - _TRAIN_KEYS)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    model = {k: v for k, v in values.items() if k in _MODEL_KEYS}
    train = {k: v for k, v in values.items() if k in _TRAIN_KEYS}
    try:
        return ModelConfig(**model), TrainConfig(**train)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    try:
        values = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return split_config(values)


def config_dict(model: ModelConfig, train: TrainConfig | None = None) -> dict:
    out = asdict(model)
    if train is not None:
        out.update(asdict(train))
    return out


def tiny_config(**overrides) -> ModelConfig:
    """The small widths used for gradient checks."""
    base = dict(d_model=16, d_s=12, d_w=8, d_hidden=16, d_att=16, num_queries=3, num_heads=2)
    base.update(overrides)
    return ModelConfig(**base)
