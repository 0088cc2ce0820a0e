"""Multi-sensor lidar odometry with prior-seeded two-stage GICP."""

from .geometry import Pose, Rotation, StampedPose
from .pointcloud import PointCloud

__version__ = "0.1.0"

__all__ = ["Pose", "Rotation", "StampedPose", "PointCloud", "__version__"]
