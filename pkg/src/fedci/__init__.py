"""Channel-independent federated traffic forecasting on a small numpy autodiff engine."""

from .experiment import ExperimentConfig, run_experiment
from .model import ModelConfig, forward, init_params

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "ModelConfig", "forward", "init_params", "run_experiment"]
