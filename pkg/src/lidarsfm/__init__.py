"""Incremental structure from motion that registers images against a LiDAR map."""
from .errors import LidarSfmError
from .geometry import CameraIntrinsics, CameraPose
from .lidar_map import LidarMap
from .config import PipelineConfig
from .pipeline import run_pipeline

__all__ = ["CameraIntrinsics", "CameraPose", "LidarMap", "LidarSfmError", "PipelineConfig", "run_pipeline"]
__version__ = "0.1.0"
