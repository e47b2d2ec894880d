"""Latent-space iterative precipitation nowcasting on a small numpy autodiff engine."""

from .autodiff import Tensor, backward, no_grad
from .hta import build_hta_schedule, rollout
from .metrics import contingency, evaluate_run, scores
from .model import LatentForecaster, ModelConfig, PhysicalIterator
from .train import TrainConfig, fit

__all__ = [
    "LatentForecaster",
    "ModelConfig",
    "PhysicalIterator",
    "Tensor",
    "TrainConfig",
    "backward",
    "build_hta_schedule",
    "contingency",
    "evaluate_run",
    "fit",
    "no_grad",
    "rollout",
    "scores",
]
__version__ = "0.1.0"
