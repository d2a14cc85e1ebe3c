"""From-scratch MLP / 1-D CNN classifiers for 256-class key-byte recovery."""

from .layers import softmax, cross_entropy
from .model import Network, build, build_cnn, build_mlp, init, forward, loss, backward
from .training import (
    Adam, TrainConfig, TrainReport, TrainingDivergedError, accuracy, augment, predict, train,
)

__all__ = [
    "Adam", "Network", "TrainConfig", "TrainReport", "TrainingDivergedError",
    "accuracy", "augment", "backward", "build", "build_cnn", "build_mlp", "cross_entropy",
    "forward", "init", "loss", "predict", "softmax", "train",
]
