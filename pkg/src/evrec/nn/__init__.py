"""Differentiable network core: layer primitives, the recurrent UNet,
Adam, checkpoints, and finite-difference gradient verification."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GRADIENT_CHECKS, THRESHOLDS, GradCheckResult, gradient_check, run_all
from .network import (NetworkConfig, backward, forward, init_weights,
                      parameter_count, trainable_keys, zero_state)
from .optim import Adam, NonFiniteGradient

__all__ = [
    "Adam", "CheckpointError", "GRADIENT_CHECKS", "GradCheckResult",
    "NetworkConfig", "NonFiniteGradient", "THRESHOLDS", "backward", "forward",
    "gradient_check", "init_weights", "load_checkpoint", "parameter_count",
    "run_all", "save_checkpoint", "trainable_keys", "zero_state",
]
