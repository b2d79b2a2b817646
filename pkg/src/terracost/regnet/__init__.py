"""Residual convolutional regression network and its training loop."""

from terracost.regnet.io import load_model, save_model
from terracost.regnet.model import (
    HEIGHT_ONLY,
    Model,
    ModelSpec,
    backward,
    forward,
    nrmse_grad,
    nrmse_loss,
)
from terracost.regnet.nn import Tensor
from terracost.regnet.train import TrainConfig, train

__all__ = [
    "HEIGHT_ONLY",
    "Model",
    "ModelSpec",
    "Tensor",
    "TrainConfig",
    "backward",
    "forward",
    "load_model",
    "nrmse_grad",
    "nrmse_loss",
    "save_model",
    "train",
]
