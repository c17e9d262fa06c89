"""Precision / recall / F-measure with greedy one-to-one matching."""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from ..geometry import BezierRegion, DegeneratePolygonWarning, bezier_to_polygon, rotated_iou


@dataclass
class ImageDetections:
    """Thresholded detections for one image, pixel units."""
    scores: np.ndarray                 # (K,)
    boxes: np.ndarray                  # (K, 5)
    beziers: np.ndarray | None = None  # (K, 16)

    def __len__(self) -> int:
        return len(self.scores)


@dataclass
class ImageMatches:
    id: str
    n_det: int
    n_gt: int
    matches: list[tuple[int, int, float]] = field(default_factory=list)   # (det, gt, iou)


@dataclass
class EvalReport:
    precision: float
    recall: float
    f_measure: float
    iou_threshold: float
    n_det: int
    n_gt: int
    n_tp: int
    images: list[ImageMatches] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    def summary(self) -> str:
        return f"P={self.precision:.3f} R={self.recall:.3f} F={self.f_measure:.3f}"


def f_measure(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _shape(box, bez):
    if bez is not None:
        return bezier_to_polygon(BezierRegion(np.asarray(bez).reshape(8, 2))).vertices
    return np.asarray(box, dtype=np.float64)


def match_image(det: ImageDetections, gt_boxes: np.ndarray, gt_beziers: np.ndarray | None = None,
                iou_thresh: float = 0.5) -> list[tuple[int, int, float]]:
    """Greedy matching in descending confidence.

    Equal confidences are ordered by box coordinates, so the result does not
    depend on the order detections arrive in.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 5)
    boxes = np.asarray(det.boxes, dtype=np.float64).reshape(-1, 5)
    keys = [boxes[:, i] for i in range(4, -1, -1)] + [-np.asarray(det.scores, dtype=np.float64)]
    order = np.lexsort(keys) if len(boxes) else np.zeros(0, dtype=int)
    use_bez = det.beziers is not None and gt_beziers is not None
    gt_shapes = [_shape(g, gt_beziers[j] if use_bez else None) for j, g in enumerate(gt_boxes)]
    taken = np.zeros(len(gt_boxes), dtype=bool)
    out = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegeneratePolygonWarning)
        for d in order:
            shape = _shape(det.boxes[d], det.beziers[d] if use_bez else None)
            best, best_iou = -1, -1.0
            for j, g in enumerate(gt_shapes):
                if taken[j]:
                    continue
                iou = rotated_iou(shape, g)
                if iou >= iou_thresh and iou > best_iou:
                    best, best_iou = j, iou
            if best >= 0:
                taken[best] = True
                out.append((int(d), best, float(best_iou)))
    return out


def evaluate(detections: Mapping[str, ImageDetections], ground_truth: Mapping[str, np.ndarray],
             iou_thresh: float = 0.5, gt_beziers: Mapping[str, np.ndarray] | None = None) -> EvalReport:
    """Corpus-level P/R/F.  Both mappings are keyed by image id."""
    if set(detections) - set(ground_truth):
        missing = sorted(set(detections) - set(ground_truth))
        raise KeyError(f"detections for unknown image ids: {missing[:3]}")
    n_det = n_gt = n_tp = 0
    images = []
    for img_id in sorted(ground_truth):
        gt = np.asarray(ground_truth[img_id], dtype=np.float64).reshape(-1, 5)
        det = detections.get(img_id, ImageDetections(np.zeros(0), np.zeros((0, 5))))
        bz = gt_beziers.get(img_id) if gt_beziers is not None else None
        m = match_image(det, gt, bz, iou_thresh)
        images.append(ImageMatches(img_id, len(det), len(gt), m))
        n_det += len(det)
        n_gt += len(gt)
        n_tp += len(m)
    p = n_tp / n_det if n_det else 0.0
    r = n_tp / n_gt if n_gt else 0.0
    return EvalReport(p, r, f_measure(p, r), iou_thresh, n_det, n_gt, n_tp, images)


def load_report(path) -> dict:
    return json.loads(Path(path).read_text())

