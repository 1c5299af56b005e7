"""Late fusion of branch detections: NMS, Gaussian Soft-NMS and weighted box fusion.

All three algorithms work class-wise: detections with different labels never
suppress or merge each other. Ordering ties are broken by lower branch id and
then by input position, so results do not depend on dict or set iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, Sequence

import numpy as np

from selective_fusion.errors import ConfigError
from selective_fusion.geometry import BoundingBox, iou_matrix

ALGORITHMS = ("nms", "soft_nms", "wbf")


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    score: float
    label: int
    branch: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    def to_dict(self) -> dict:
        return {"label": self.label, "score": self.score, "box": self.box.as_list()}


@dataclass(frozen=True)
class FusionConfig:
    algorithm: str = "nms"
    iou_threshold: float = 0.4
    skip_box_threshold: float = 0.01
    sigma: float = 0.5
    branch_weights: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown fusion algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if not 0.0 < self.iou_threshold < 1.0:
            raise ConfigError(f"iou_threshold must be in (0, 1), got {self.iou_threshold}")
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        weights = {int(k): float(v) for k, v in dict(self.branch_weights).items()}
        if any(w <= 0 for w in weights.values()):
            raise ConfigError("branch weights must be positive")
        object.__setattr__(self, "branch_weights", weights)

    def weight(self, branch: int) -> float:
        return self.branch_weights.get(branch, 1.0)

    def to_dict(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "iou_threshold": self.iou_threshold,
            "skip_box_threshold": self.skip_box_threshold,
            "sigma": self.sigma,
            "branch_weights": {str(k): v for k, v in sorted(self.branch_weights.items())},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "FusionConfig":
        data = dict(data or {})
        known = {"algorithm", "iou_threshold", "skip_box_threshold", "sigma", "branch_weights"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown fusion config keys {sorted(unknown)}")
        return cls(**data)


def _order(dets: Sequence[Detection]) -> List[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].branch, i))


def _by_label(dets: Sequence[Detection]) -> Dict[int, List[int]]:
    groups: Dict[int, List[int]] = {}
    for i, d in enumerate(dets):
        groups.setdefault(d.label, []).append(i)
    return groups


def _sorted_output(dets: List[Detection]) -> List[Detection]:
    return [dets[i] for i in _order(dets)]


def nms(dets: Sequence[Detection], cfg: FusionConfig) -> List[Detection]:
    """Greedy per-label suppression of boxes overlapping a higher-scored one."""
    keep: List[Detection] = []
    for idx in _by_label(dets).values():
        group = [dets[i] for i in idx]
        order = _order(group)
        boxes = np.array([group[i].box.as_list() for i in order])
        overlaps = iou_matrix(boxes, boxes)
        alive = np.ones(len(order), dtype=bool)
        for pos in range(len(order)):
            if not alive[pos]:
                continue
            keep.append(group[order[pos]])
            alive[pos + 1 :] &= overlaps[pos, pos + 1 :] <= cfg.iou_threshold
    return _sorted_output(keep)


def soft_nms(dets: Sequence[Detection], cfg: FusionConfig) -> List[Detection]:
    """Gaussian Soft-NMS: decay overlapping scores by ``exp(-iou^2 / sigma)``."""
    out: List[Detection] = []
    for idx in _by_label(dets).values():
        group = [dets[i] for i in idx]
        boxes = np.array([d.box.as_list() for d in group])
        overlaps = iou_matrix(boxes, boxes)
        scores = np.array([d.score for d in group], dtype=float)
        branches = [d.branch for d in group]
        remaining = list(range(len(group)))
        while remaining:
            best = min(remaining, key=lambda i: (-scores[i], branches[i], i))
            remaining.remove(best)
            out.append(replace(group[best], score=float(scores[best])))
            if remaining:
                rest = np.array(remaining)
                scores[rest] *= np.exp(-(overlaps[best, rest] ** 2) / cfg.sigma)
    kept = [d for d in out if d.score >= cfg.skip_box_threshold]
    return _sorted_output(kept)


def wbf(dets: Sequence[Detection], cfg: FusionConfig) -> List[Detection]:
    """Weighted box fusion.

    Boxes are scanned by descending score and join the first cluster whose
    current fused box overlaps them by more than ``iou_threshold``. Fused
    corners are averages weighted by ``score * branch_weight``; the fused
    score is the branch-weighted mean of member scores.
    """
    out: List[Detection] = []
    candidates = [d for d in dets if d.score >= cfg.skip_box_threshold]
    for idx in _by_label(candidates).values():
        group = [candidates[i] for i in idx]
        clusters: List[List[Detection]] = []
        fused_boxes: List[np.ndarray] = []
        for i in _order(group):
            d = group[i]
            box = d.box.as_array()
            target = None
            if fused_boxes:
                ious = iou_matrix(box[None, :], np.array(fused_boxes))[0]
                hits = np.flatnonzero(ious > cfg.iou_threshold)
                if hits.size:
                    target = int(hits[0])
            if target is None:
                clusters.append([d])
                fused_boxes.append(box)
            else:
                clusters[target].append(d)
                fused_boxes[target] = _fused_box(clusters[target], cfg)
        for members, box in zip(clusters, fused_boxes):
            w = np.array([cfg.weight(m.branch) for m in members])
            s = np.array([m.score for m in members])
            score = float(np.clip((w * s).sum() / w.sum(), 0.0, 1.0))
            out.append(Detection(_envelope_box(box, members), score, members[0].label, members[0].branch))
    return _sorted_output(out)


def _fused_box(members: Sequence[Detection], cfg: FusionConfig) -> np.ndarray:
    c = np.array([m.score * cfg.weight(m.branch) for m in members])
    boxes = np.array([m.box.as_list() for m in members])
    if c.sum() <= 0:
        return boxes.mean(axis=0)
    return (c[:, None] * boxes).sum(axis=0) / c.sum()


def _envelope_box(box: np.ndarray, members: Sequence[Detection]) -> BoundingBox:
    # Rounding can leave a weighted mean a few ulps outside the member envelope.
    corners = np.array([m.box.as_list() for m in members])
    box = np.clip(box, corners.min(axis=0), corners.max(axis=0))
    return BoundingBox(*(float(v) for v in box))


_DISPATCH = {"nms": nms, "soft_nms": soft_nms, "wbf": wbf}


def fuse(branch_outputs: Mapping[int, Iterable[Detection]], cfg: FusionConfig) -> List[Detection]:
    """Tag detections with their source branch and run the configured algorithm."""
    if not branch_outputs:
        raise ConfigError("fusion needs at least one branch")
    try:
        algorithm = _DISPATCH[cfg.algorithm]
    except KeyError:
        raise ConfigError(f"unknown fusion algorithm {cfg.algorithm!r}") from None
    pooled: List[Detection] = []
    for branch in sorted(branch_outputs):
        pooled.extend(d if d.branch == branch else replace(d, branch=branch) for d in branch_outputs[branch])
    return algorithm(pooled, cfg)


def detections_close(a: Detection, b: Detection, tol: float = 1e-9) -> bool:
    return (
        a.label == b.label
        and math.isclose(a.score, b.score, abs_tol=tol)
        and np.allclose(a.box.as_array(), b.box.as_array(), atol=tol, rtol=0)
    )
