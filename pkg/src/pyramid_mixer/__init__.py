"""All-MLP sequential recommender built on a small numpy autodiff core.

The model mixes user histories along two axes (behavior steps and feature
channels) with low-rank MLP blocks, fuses the branches through a learned
gate, and stacks the result into a multi-period pyramid whose scales are
pooled into one scoring vector per user.
"""

from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    DivergenceError,
    FormatError,
    GraphError,
    NumericError,
    PymxError,
)
from .estimator import PyramidMixerRecommender
from .model import ModelConfig

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "DivergenceError",
    "FormatError",
    "GraphError",
    "ModelConfig",
    "NumericError",
    "PymxError",
    "PyramidMixerRecommender",
    "__version__",
]
