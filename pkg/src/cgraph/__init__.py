"""Few-shot cross-domain segmentation with structural graph priors, on a numpy autodiff engine."""

from .config import ConfigError, TrainConfig, load_config, parse_config
from .model import ModelParams, forward, init_model
from .training import evaluate_dsc, evaluate_suite, train_loop

__all__ = [
    "ConfigError",
    "ModelParams",
    "TrainConfig",
    "evaluate_dsc",
    "evaluate_suite",
    "forward",
    "init_model",
    "load_config",
    "parse_config",
    "train_loop",
]
