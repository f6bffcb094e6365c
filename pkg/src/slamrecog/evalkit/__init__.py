"""Synthetic scenes, detection metrics and plotting."""

from .metrics import (Detection, PrCurve, average_precision, multi_view_accuracy, pr_curve,
                      recall_at_iou, single_view_accuracy)
from .synth import SceneSpec, SyntheticScene, generate_scene, write_scene

__all__ = [
    "Detection", "PrCurve", "SceneSpec", "SyntheticScene", "average_precision",
    "generate_scene", "multi_view_accuracy", "pr_curve", "recall_at_iou",
    "single_view_accuracy", "write_scene",
]
