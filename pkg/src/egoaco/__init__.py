"""Class activation pooling, LSTA and the EgoACO network on a small autodiff core."""
from egoaco.tensor import DimensionError, Tape, Tensor

__version__ = "0.1.0"
__all__ = ["Tape", "Tensor", "DimensionError", "__version__"]
