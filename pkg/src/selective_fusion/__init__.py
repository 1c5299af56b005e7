"""Context-aware selective sensor fusion: gating, detection fusion and evaluation."""

from selective_fusion.geometry import BoundingBox, iou
from selective_fusion.boxfusion import Detection, FusionConfig, fuse, nms, soft_nms, wbf

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "Detection",
    "FusionConfig",
    "fuse",
    "iou",
    "nms",
    "soft_nms",
    "wbf",
]
