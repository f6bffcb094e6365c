"""Object recognition over semi-dense SLAM maps.

Stages: density-based object seeds projected into posed frames, dense
SIFT features encoded as pyramid VLAD through per-codeword summed-area
tables, one-vs-all logistic classifiers, and multi-view evidence fusion.
"""

from .config import PipelineConfig, load_config, save_config
from .geometry import BoundingBox, CameraIntrinsics, Pose, iou, project
from .mapio import DataError, Scene, load_scene, save_scene

__version__ = "0.1.0"

__all__ = [
    "BoundingBox", "CameraIntrinsics", "DataError", "PipelineConfig", "Pose", "Scene",
    "iou", "load_config", "load_scene", "project", "save_config", "save_scene",
]
