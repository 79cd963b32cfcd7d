"""Chunkwise self-transduction models, losses and decoders on a numpy autodiff core."""

from .model import EOS, FIRST_TOKEN, SOS, Model, ModelConfig
from .synthdata import SynthTaskConfig, generate_dataset, token_error_rate
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "EOS",
    "FIRST_TOKEN",
    "SOS",
    "Model",
    "ModelConfig",
    "SynthTaskConfig",
    "TrainConfig",
    "generate_dataset",
    "token_error_rate",
    "train",
]
