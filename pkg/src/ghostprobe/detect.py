"""Boxes, masks, and detection metrics.

Boxes are axis-aligned (x_min, y_min, x_max, y_max) in pixels and half-open
along both axes, so a box covers integer pixel columns [x_min, x_max) and
rows [y_min, y_max) after rounding.  That makes rasterizing a box and
extracting the tight box of the resulting component exact inverses.

Evaluation thresholds a probability map, splits it into 4-connected
components, boxes each surviving component, and greedily matches detections
to ground truth in descending score order with an IoU gate.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ShapeError
from .tensor import Tensor

log = logging.getLogger(__name__)

IOU_THRESHOLD = 0.5
PROB_THRESHOLD = 0.5
MIN_AREA_FRACTION = 0.001


def _check_box(box):
    x_min, y_min, x_max, y_max = box
    if not (x_min < x_max and y_min < y_max):
        raise ShapeError(f"box {box} is not ordered min < max")
    if x_min < 0 or y_min < 0:
        raise ShapeError(f"box {box} has negative coordinates")


@dataclass
class Annotation:
    """Ground-truth boxes for one sample."""

    sample_id: str
    boxes: list

    def __post_init__(self):
        self.boxes = [tuple(float(v) for v in b) for b in self.boxes]
        for box in self.boxes:
            _check_box(box)


@dataclass
class Detection:
    """One predicted box with its confidence."""

    box: tuple
    score: float

    def __post_init__(self):
        self.box = tuple(float(v) for v in self.box)
        _check_box(self.box)
        if not 0.0 <= self.score <= 1.0:
            raise ShapeError(f"score {self.score} outside [0,1]")


@dataclass
class EvalReport:
    """TP/FP/FN counts and the derived ratios."""

    tp: int
    fp: int
    fn: int
    recall: float
    precision: float
    f1: float

    def as_dict(self):
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn,
                "recall": self.recall, "precision": self.precision, "f1": self.f1}


def report_from_counts(tp, fp, fn):
    """Recall/precision/F1 from counts; empty denominators score 0."""
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    f1 = (2.0 * recall * precision / (recall + precision)
          if recall + precision > 0 else 0.0)
    return EvalReport(tp=tp, fp=fp, fn=fn, recall=recall, precision=precision, f1=f1)


def f1_score(recall, precision):
    if recall + precision <= 0:
        return 0.0
    return 2.0 * recall * precision / (recall + precision)


def iou(a, b):
    """Intersection over union of two half-open boxes."""
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = ((a[2] - a[0]) * (a[3] - a[1])
             + (b[2] - b[0]) * (b[3] - b[1]) - inter)
    return inter / union


def _rounded_span(lo, hi, limit):
    lo = max(int(round(lo)), 0)
    hi = min(int(round(hi)), limit)
    return lo, hi


def rasterize_annotation(ann, h, w):
    """Binary mask [1,h,w], 1 inside any box.

    Boxes that collapse to zero area after rounding (or fall outside the
    mask) are dropped with a warning rather than failing the sample.
    """
    mask = np.zeros((1, h, w), dtype=np.float32)
    for box in ann.boxes:
        x0, x1 = _rounded_span(box[0], box[2], w)
        y0, y1 = _rounded_span(box[1], box[3], h)
        if x1 <= x0 or y1 <= y0:
            log.warning("sample %s: box %s degenerate after rounding, dropped",
                        ann.sample_id, box)
            continue
        mask[0, y0:y1, x0:x1] = 1.0
    return Tensor(mask)


def _prob_array(prob_map):
    data = prob_map.data if isinstance(prob_map, Tensor) else np.asarray(prob_map)
    lead = data.shape[:-2]
    if data.ndim < 2 or lead != (1,) * len(lead):
        raise ShapeError(f"probability map {data.shape} is not a single 2D map")
    return data.reshape(data.shape[-2:])


def postprocess(prob_map, threshold=PROB_THRESHOLD, min_area_fraction=MIN_AREA_FRACTION):
    """Threshold a probability map into scored boxes.

    4-connected components above threshold become detections when their
    area reaches min_area_fraction of the map; each scores the mean
    probability over its own pixels.  Sorted by descending score.
    """
    prob = _prob_array(prob_map)
    h, w = prob.shape
    labels, n = ndimage.label(prob >= threshold)
    min_area = min_area_fraction * h * w
    dets = []
    for lab in range(1, n + 1):
        rows, cols = np.nonzero(labels == lab)
        if rows.size < min_area:
            continue
        box = (float(cols.min()), float(rows.min()),
               float(cols.max() + 1), float(rows.max() + 1))
        dets.append(Detection(box=box, score=float(prob[rows, cols].mean())))
    dets.sort(key=lambda d: (-d.score, d.box))
    return dets


def match_and_score(dets, ann, iou_threshold=IOU_THRESHOLD):
    """Greedy matching of detections to ground truth, best score first.

    A detection whose best-IoU still-unmatched ground-truth box clears the
    threshold is a true positive and consumes that box; otherwise it is a
    false positive.  Leftover ground truth counts as false negatives.
    """
    ordered = sorted(dets, key=lambda d: -d.score)
    unmatched = list(ann.boxes)
    tp = 0
    for det in ordered:
        if not unmatched:
            break
        overlaps = [iou(det.box, gt) for gt in unmatched]
        best = int(np.argmax(overlaps))
        if overlaps[best] >= iou_threshold:
            unmatched.pop(best)
            tp += 1
    fp = len(dets) - tp
    fn = len(unmatched)
    return report_from_counts(tp, fp, fn)
