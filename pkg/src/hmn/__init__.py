"""Hierarchical modular network for video captioning, on a small numpy autodiff core."""

from .config import ModelConfig, TrainConfig, load_config, tiny_config
from .data import Dataset, load_dataset, save_dataset, synth_generate
from .decoder import beam_search, greedy_decode
from .encoder import VideoFeatures
from .estimator import HMNCaptioner
from .language import Vocabulary
from .matching import hungarian
from .metrics import bleu4, cider, evaluate, rouge_l
from .model import HMNModel, total_loss
from .training import load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Dataset", "HMNCaptioner", "HMNModel", "ModelConfig", "TrainConfig", "VideoFeatures",
    "Vocabulary", "beam_search", "bleu4", "cider", "evaluate", "greedy_decode", "hungarian",
    "load_checkpoint", "load_config", "load_dataset", "rouge_l", "save_checkpoint",
    "save_dataset", "synth_generate", "tiny_config", "total_loss", "train",
]
