"""Co-saliency detection library: group semantics propagation on a
hand-rolled autodiff engine, with a synthetic dataset and evaluation
metrics for co-salient segmentation maps."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    FormatError,
    IoError,
    NumericError,
    ShapeError,
    TopicNetError,
)
from .tensor import Tensor, no_grad

__all__ = [
    "ConfigError",
    "FormatError",
    "IoError",
    "NumericError",
    "ShapeError",
    "TopicNetError",
    "Tensor",
    "no_grad",
    "__version__",
]
