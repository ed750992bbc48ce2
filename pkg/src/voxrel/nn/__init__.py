from voxrel.nn.network import (
    Architecture,
    ForwardPass,
    Gradients,
    Network,
    backward,
    build_network,
    classifier_architecture,
    count_params,
    forward,
    loss,
    paper_architecture,
)
from voxrel.nn.training import TrainConfig, TrainHistory, adam_step, fine_tune, train
from voxrel.nn.model_io import load_model, save_model

__all__ = [
    "Architecture",
    "ForwardPass",
    "Gradients",
    "Network",
    "TrainConfig",
    "TrainHistory",
    "adam_step",
    "backward",
    "build_network",
    "classifier_architecture",
    "count_params",
    "fine_tune",
    "forward",
    "load_model",
    "loss",
    "paper_architecture",
    "save_model",
    "train",
]
