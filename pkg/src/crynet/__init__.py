"""Improved ECAPA-TDNN for six-way infant cry emotion recognition, built on a small numpy autodiff core."""

from .config import FrontendConfig, RunConfig, TrainConfig
from .model import LABELS, EmotionLabel, Model, ModelConfig, build, build_baseline, build_improved
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "EmotionLabel", "FrontendConfig", "LABELS", "Model", "ModelConfig", "RunConfig",
    "Tensor", "TrainConfig", "backward", "build", "build_baseline", "build_improved", "no_grad",
]
