"""Stereo structure from motion with LiDAR-assisted validation and refinement."""
from .geom import Calibration, CameraModel, RigidTransform
from .kernels import BACKEND_NAME

__version__ = "0.1.0"

__all__ = ["BACKEND_NAME", "Calibration", "CameraModel", "RigidTransform", "__version__"]
