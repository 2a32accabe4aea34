"""Implicit occupancy mapping from LiDAR scans with joint pose refinement."""

__version__ = "0.1.0"

from .field import OccupancyField  # noqa: E402
from .geometry import PoseSE3  # noqa: E402
from .supervision import ThicknessPrior, p_occ  # noqa: E402
from .trainer import TrainConfig, train  # noqa: E402

__all__ = ["OccupancyField", "PoseSE3", "ThicknessPrior", "TrainConfig", "p_occ", "train", "__version__"]
