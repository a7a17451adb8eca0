"""Bottom-up broadcast neural network (BBNN) for music genre classification."""
from .model import BbnnModel, build, count_params
from .tensor import ShapeError

__all__ = ["BbnnModel", "ShapeError", "build", "count_params"]
