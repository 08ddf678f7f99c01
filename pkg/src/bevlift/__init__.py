"""bevlift: occupancy-weighted BEV pyramid fusion with low-rank visual-prompt
adaptation of heterogeneous agents, built on a minimal reverse-mode autodiff
engine with interchangeable compiled (Cython) and numpy convolution backends.
"""

__version__ = "0.1.0"

from .config import DEFAULT_CONFIG, ConfigError, config_hash, paper_scale_config, validate_config
from .tensor import Tensor
from .model import Model
from .pipeline import (
    FrozenParameterError,
    evaluate,
    generate_dataset,
    load_model,
    train_base,
    train_lift,
)

__all__ = [
    "DEFAULT_CONFIG",
    "ConfigError",
    "FrozenParameterError",
    "Model",
    "Tensor",
    "config_hash",
    "evaluate",
    "generate_dataset",
    "load_model",
    "paper_scale_config",
    "train_base",
    "train_lift",
    "validate_config",
    "__version__",
]
