"""Federated-learning simulation lab with per-layer divergence instrumentation."""

from .errors import FedSimLabError, ValidationError, ConfigError
from .engine import LayerSpec, ModelSpec, Params, init_params, forward, loss_and_grad, sgd_step

__version__ = "0.1.0"

__all__ = [
    "FedSimLabError", "ValidationError", "ConfigError",
    "LayerSpec", "ModelSpec", "Params",
    "init_params", "forward", "loss_and_grad", "sgd_step",
    "__version__",
]
