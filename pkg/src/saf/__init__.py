"""Spectrum attention fusion speech enhancement on a small numpy autodiff engine."""

from saf.dsp import AudioClip, SpectraBundle, TargetSpectra
from saf.model import ModelConfig, count_params, forward, init_params, loss
from saf.tensor import Tensor
from saf.training import TrainConfig, train

__all__ = [
    "AudioClip",
    "ModelConfig",
    "SpectraBundle",
    "TargetSpectra",
    "Tensor",
    "TrainConfig",
    "count_params",
    "forward",
    "init_params",
    "loss",
    "train",
]
__version__ = "0.1.0"
