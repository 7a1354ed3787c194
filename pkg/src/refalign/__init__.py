"""Reference-guided cross-modal retrieval at desk scale."""

__version__ = "0.1.0"

from . import tensor
from .tensor import Tensor, parameter, backward

__all__ = ["tensor", "Tensor", "parameter", "backward", "__version__"]
