"""
Late fusion of overlapping detections
=====================================

Three branches report boxes on the same two objects. NMS keeps the best
box per cluster, Soft-NMS decays the rest, and WBF averages the corners.
"""

from selective_fusion.boxfusion import Detection, FusionConfig, fuse
from selective_fusion.geometry import BoundingBox


def det(box, score, label, branch):
    return Detection(BoundingBox(*box), score, label, branch)


outputs = {
    0: [det((100, 100, 160, 150), 0.90, 1, 0), det((300, 120, 330, 190), 0.40, 2, 0)],
    1: [det((104, 98, 166, 152), 0.70, 1, 1)],
    2: [det((96, 104, 158, 148), 0.60, 1, 2), det((302, 118, 334, 186), 0.80, 2, 2)],
}

for cfg in (
    FusionConfig("nms", iou_threshold=0.4),
    FusionConfig("soft_nms", sigma=0.5, skip_box_threshold=0.05),
    FusionConfig("wbf", iou_threshold=0.4),
    FusionConfig("wbf", iou_threshold=0.4, branch_weights={0: 1.0, 1: 1.0, 2: 3.0}),
):
    print(cfg.algorithm, cfg.branch_weights or "")
    for d in fuse(outputs, cfg):
        box = ", ".join(f"{v:6.1f}" for v in d.box.as_list())
        print(f"  class {d.label}  score {d.score:.3f}  box ({box})  from branch {d.branch}")
