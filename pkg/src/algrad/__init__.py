"""Pool-based active learning with entropy-gradient-norm acquisition and a loss-prediction head."""

from .acquisition import AcquisitionScore, Strategy
from .autograd import Tensor
from .config import ConfigError, ExperimentConfig, load_config
from .experiment import run_experiment
from .models import AuxModel, ForwardOutput, MainModel, build_default_desk_model

__all__ = [
    "AcquisitionScore", "AuxModel", "ConfigError", "ExperimentConfig", "ForwardOutput",
    "MainModel", "Strategy", "Tensor", "build_default_desk_model", "load_config", "run_experiment",
]
__version__ = "0.1.0"
