"""Painting LiDAR points with 2D and 3D semantic labels and fusing the two
sources per voxel with a learned attention gate."""

from .errors import (ConfigError, ContractError, DataError, FusionPaintError, GenerationError, ShapeError,
                     TrainingError)

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "DataError", "FusionPaintError", "GenerationError", "ShapeError",
           "TrainingError", "__version__"]
