"""Self-contained convolutional network: layers, training, persistence."""

from .network import (
    DEFAULT_INPUT_SHAPE,
    DEFAULT_SPEC,
    Network,
    load_model,
    mse_loss,
    save_model,
    sgd_momentum_step,
)
from .train import TrainConfig, TrainedModel, evaluate_mse, train

__all__ = [
    "DEFAULT_INPUT_SHAPE",
    "DEFAULT_SPEC",
    "Network",
    "TrainConfig",
    "TrainedModel",
    "evaluate_mse",
    "load_model",
    "mse_loss",
    "save_model",
    "sgd_momentum_step",
    "train",
]
