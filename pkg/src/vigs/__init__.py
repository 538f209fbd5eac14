"""Visual-inertial SLAM on a 3D Gaussian scene map.

The package is a plain numpy/scipy library: a differentiable splatting
rasterizer, IMU pre-integration, pose tracking, keyframe selection, map
densification/optimization, dataset IO, and trajectory evaluation, plus a
command line front end (``vigs``).
"""

from .geometry import Intrinsics, Pose
from .gaussian_map import Gaussian3D, GaussianMap

__all__ = ["Intrinsics", "Pose", "Gaussian3D", "GaussianMap"]

__version__ = "0.1.0"
