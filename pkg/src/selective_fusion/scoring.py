"""Detection evaluation at IoU >= 0.5: matching, precision/recall, AP and mAP.

AP is the all-point sum ``sum_n (R_n - R_{n-1}) P_n`` over the raw curve, with
no precision envelope and no 11-point sampling.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from selective_fusion.boxfusion import Detection
from selective_fusion.errors import EvaluationError
from selective_fusion.geometry import BoundingBox, iou_matrix

MATCH_IOU = 0.5


class NoGroundTruth(EvaluationError):
    """The requested class has no ground-truth instances."""


@dataclass(frozen=True)
class GroundTruth:
    label: int
    box: BoundingBox


@dataclass
class MatchResult:
    # (score, is_tp, label) per detection, in the order matching visited them
    records: List[Tuple[float, bool, int]] = field(default_factory=list)
    fn: Dict[int, int] = field(default_factory=dict)
    n_gt: Dict[int, int] = field(default_factory=dict)

    def tp_count(self, label: Optional[int] = None) -> int:
        return sum(1 for _, tp, lab in self.records if tp and (label is None or lab == label))

    def fp_count(self, label: Optional[int] = None) -> int:
        return sum(1 for _, tp, lab in self.records if not tp and (label is None or lab == label))

    def fn_count(self, label: Optional[int] = None) -> int:
        if label is None:
            return sum(self.fn.values())
        return self.fn.get(label, 0)


def _det_order(dets: Sequence[Detection]) -> List[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].branch, i))


def match(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thresh: float = MATCH_IOU) -> MatchResult:
    """Greedy per-class matching in descending score order.

    A detection is a true positive when the unmatched same-class ground truth
    it overlaps most has IoU >= ``iou_thresh``; that ground truth is then used up.
    """
    result = MatchResult()
    gt_labels = np.array([g.label for g in gts], dtype=int)
    for lab in np.unique(gt_labels):
        result.n_gt[int(lab)] = int((gt_labels == lab).sum())
    gt_boxes = np.array([g.box.as_list() for g in gts]).reshape(-1, 4)
    det_boxes = np.array([d.box.as_list() for d in dets]).reshape(-1, 4)
    overlaps = iou_matrix(det_boxes, gt_boxes)
    used = np.zeros(len(gts), dtype=bool)
    for i in _det_order(dets):
        d = dets[i]
        cand = (gt_labels == d.label) & ~used
        tp = False
        if cand.any():
            ious = np.where(cand, overlaps[i], -1.0)
            j = int(np.argmax(ious))
            if ious[j] >= iou_thresh:
                used[j] = True
                tp = True
        result.records.append((d.score, tp, d.label))
    for lab, n in result.n_gt.items():
        result.fn[lab] = n - int(((gt_labels == lab) & used).sum())
    return result


@dataclass(frozen=True)
class PRCurve:
    points: Tuple[Tuple[float, float], ...]

    @property
    def recall(self) -> np.ndarray:
        return np.array([r for r, _ in self.points])

    @property
    def precision(self) -> np.ndarray:
        return np.array([p for _, p in self.points])


def pr_curve(results: Iterable[MatchResult], label: int) -> PRCurve:
    """Precision/recall at every score threshold, pooled over a dataset.

    Detections are ordered by descending score; equal scores keep dataset
    order (scene order, then matching order), which is deterministic.
    """
    scored: List[Tuple[float, bool]] = []
    n_gt = 0
    for r in results:
        n_gt += r.n_gt.get(label, 0)
        scored.extend((s, tp) for s, tp, lab in r.records if lab == label)
    if n_gt == 0:
        raise NoGroundTruth(f"class {label} has no ground-truth instances")
    order = sorted(range(len(scored)), key=lambda i: (-scored[i][0], i))
    tp_cum = 0
    fp_cum = 0
    points = []
    for i in order:
        if scored[i][1]:
            tp_cum += 1
        else:
            fp_cum += 1
        points.append((tp_cum / n_gt, tp_cum / (tp_cum + fp_cum)))
    return PRCurve(tuple(points))


def average_precision(curve: PRCurve) -> float:
    ap = 0.0
    prev_recall = 0.0
    for recall, precision in curve.points:
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def mean_ap(per_class: Mapping[int, float]) -> float:
    if not per_class:
        raise EvaluationError("no classes with ground truth to average")
    return float(np.mean([per_class[k] for k in sorted(per_class)]))


@dataclass
class EvalReport:
    per_class_ap: Dict[int, float]
    map: float
    excluded_classes: List[int] = field(default_factory=list)
    metadata: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "metadata": dict(self.metadata),
            "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
            "map": self.map,
            "excluded_classes": list(self.excluded_classes),
        }


def evaluate(
    predictions: Sequence[Sequence[Detection]],
    ground_truth: Sequence[Sequence[GroundTruth]],
    classes: Sequence[int],
    metadata: Optional[Mapping] = None,
    iou_thresh: float = MATCH_IOU,
) -> EvalReport:
    """Score per-scene predictions against per-scene ground truth."""
    if len(predictions) != len(ground_truth):
        raise EvaluationError("predictions and ground truth cover different scene counts")
    results = [match(p, g, iou_thresh) for p, g in zip(predictions, ground_truth)]
    per_class = {}
    excluded = []
    for c in classes:
        try:
            per_class[c] = average_precision(pr_curve(results, c))
        except NoGroundTruth:
            excluded.append(c)
    return EvalReport(per_class, mean_ap(per_class), excluded, dict(metadata or {}))


REPORT_META_COLUMNS = ("config", "gate", "k", "algorithm", "seed")


def write_reports_csv(reports: Sequence[EvalReport], classes: Sequence[int], path) -> None:
    """One row per report: metadata columns, per-class AP (percent) and mAP."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(REPORT_META_COLUMNS) + [f"ap_{c}" for c in classes] + ["map"])
        for r in reports:
            row = [r.metadata.get(k, "") for k in REPORT_META_COLUMNS]
            row += [f"{100 * r.per_class_ap[c]:.4f}" if c in r.per_class_ap else "" for c in classes]
            row.append(f"{100 * r.map:.4f}")
            w.writerow(row)


def write_reports_json(reports: Sequence[EvalReport], path) -> None:
    with open(path, "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=1, sort_keys=True)
        fh.write("\n")
