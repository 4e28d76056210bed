"""SGD micro-trainer and the two desk-scale experiments."""

from .optim import SGD, OptimConfig, cosine_lr, sgd_step, step_lr
from .record import TrainRecord, parse_config

__all__ = ["SGD", "OptimConfig", "TrainRecord", "cosine_lr", "parse_config", "sgd_step", "step_lr"]
