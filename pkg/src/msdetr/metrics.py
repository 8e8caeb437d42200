"""COCO-style detection metrics: per-class AP, mAP over IoU thresholds, size buckets."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.exceptions import UndefinedMetricWarning

from .tensor import DomainError

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
EVAL_RESOLUTION = 640
AREA_RANGES = {"all": (0.0, np.inf), "small": (0.0, 32.0 ** 2),
               "medium": (32.0 ** 2, 96.0 ** 2), "large": (96.0 ** 2, np.inf)}


def iou(a, b):
    """Intersection over union of two xyxy boxes; 0 when the union is empty."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def iou_matrix(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = np.prod(np.clip(rb - lt, 0, None), axis=-1)
    area_a = np.prod(a[:, 2:] - a[:, :2], axis=-1)
    area_b = np.prod(b[:, 2:] - b[:, :2], axis=-1)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def cxcywh_to_xyxy(b):
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return np.concatenate([b[:, :2] - b[:, 2:] / 2, b[:, :2] + b[:, 2:] / 2], axis=1)


@dataclass
class EvalRecord:
    """Predictions and ground truth for one image.

    Boxes are xyxy in any consistent unit.  ``gt_areas`` (and the optional
    ``pred_areas``) are in evaluation pixels and drive the size buckets.
    """

    pred_boxes: np.ndarray
    scores: np.ndarray
    pred_labels: np.ndarray
    gt_boxes: np.ndarray
    gt_labels: np.ndarray
    gt_areas: np.ndarray
    pred_areas: np.ndarray = field(default=None)

    def __post_init__(self):
        self.pred_boxes = np.asarray(self.pred_boxes, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.pred_labels = np.asarray(self.pred_labels, dtype=np.int64).reshape(-1)
        self.gt_boxes = np.asarray(self.gt_boxes, dtype=np.float64).reshape(-1, 4)
        self.gt_labels = np.asarray(self.gt_labels, dtype=np.int64).reshape(-1)
        self.gt_areas = np.asarray(self.gt_areas, dtype=np.float64).reshape(-1)
        if self.pred_areas is None:
            self.pred_areas = np.full(len(self.scores), np.nan)
        self.pred_areas = np.asarray(self.pred_areas, dtype=np.float64).reshape(-1)
        if not (len(self.pred_boxes) == len(self.scores) == len(self.pred_labels) == len(self.pred_areas)):
            raise ValueError("prediction boxes, scores and labels differ in length")
        if not (len(self.gt_boxes) == len(self.gt_labels) == len(self.gt_areas)):
            raise ValueError("ground-truth boxes, labels and areas differ in length")
        if np.any((self.scores < 0) | (self.scores > 1)) or not np.all(np.isfinite(self.scores)):
            raise DomainError("scores must lie in [0, 1]")
        if not (np.all(np.isfinite(self.pred_boxes)) and np.all(np.isfinite(self.gt_boxes))):
            raise DomainError("boxes must be finite")

    @classmethod
    def from_normalized(cls, pred_boxes, scores, pred_labels, gt_boxes, gt_labels,
                        resolution=EVAL_RESOLUTION):
        """Build from normalised (cx, cy, w, h) boxes; areas are measured at ``resolution``."""
        pred = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
        gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
        return cls(cxcywh_to_xyxy(pred), scores, pred_labels, cxcywh_to_xyxy(gt), gt_labels,
                   gt[:, 2] * gt[:, 3] * resolution ** 2, pred[:, 2] * pred[:, 3] * resolution ** 2)


def _evaluate_image(rec, cls, thresh, area_range):
    """Greedy matching for one image and class.

    Returns (scores, is_tp, ignored) for the detections plus the count of
    ground truth that falls inside ``area_range``.
    """
    lo, hi = area_range
    gmask = rec.gt_labels == cls
    dmask = rec.pred_labels == cls
    g_boxes, g_area = rec.gt_boxes[gmask], rec.gt_areas[gmask]
    g_ignore = (g_area < lo) | (g_area > hi)
    # regular ground truth first so a detection prefers it over an ignored one
    g_order = np.argsort(g_ignore, kind="stable")
    g_boxes, g_ignore = g_boxes[g_order], g_ignore[g_order]

    d_idx = np.flatnonzero(dmask)
    d_idx = d_idx[np.argsort(-rec.scores[d_idx], kind="stable")]
    d_boxes = rec.pred_boxes[d_idx]
    ious = iou_matrix(d_boxes, g_boxes)
    taken = np.zeros(len(g_boxes), dtype=bool)
    tp = np.zeros(len(d_idx), dtype=bool)
    ignored = np.zeros(len(d_idx), dtype=bool)
    for i in range(len(d_idx)):
        best, best_iou = -1, min(thresh, 1 - 1e-10)
        for j in range(len(g_boxes)):
            if taken[j]:
                continue
            if best > -1 and not g_ignore[best] and g_ignore[j]:
                break
            if ious[i, j] < best_iou:
                continue
            best, best_iou = j, ious[i, j]
        if best > -1:
            taken[best] = True
            tp[i] = True
            ignored[i] = g_ignore[best]
        else:
            area = rec.pred_areas[d_idx[i]]
            if np.isfinite(area):
                ignored[i] = (area < lo) or (area > hi)
    return rec.scores[d_idx], tp, ignored, int((~g_ignore).sum())


def precision_recall(records, cls, iou_thresh=0.5, area_range=AREA_RANGES["all"]):
    """Cumulative (precision, recall) arrays in descending score order, or ``None`` without GT."""
    scores, tps, n_gt = [], [], 0
    for rec in records:
        s, tp, ign, n = _evaluate_image(rec, cls, iou_thresh, area_range)
        scores.append(s[~ign])
        tps.append(tp[~ign])
        n_gt += n
    if n_gt == 0:
        return None
    scores = np.concatenate(scores) if scores else np.zeros(0)
    tps = np.concatenate(tps) if tps else np.zeros(0, dtype=bool)
    order = np.argsort(-scores, kind="mergesort")
    tp_cum = np.cumsum(tps[order])
    fp_cum = np.cumsum(~tps[order])
    recall = tp_cum / n_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(np.float64).eps)
    return precision, recall


def interpolated_ap(precision, recall):
    """101-point interpolated area under a precision-recall curve."""
    if len(precision) == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(q.mean())


def average_precision(records, cls, iou_thresh=0.5, area_range=AREA_RANGES["all"]):
    """AP of one class at one IoU threshold; ``None`` when the class has no ground truth."""
    pr = precision_recall(records, cls, iou_thresh, area_range)
    if pr is None:
        return None
    return interpolated_ap(*pr)


@dataclass
class MetricsReport:
    map50: float
    map5095: float
    ap_s: float | None
    ap_m: float | None
    ap_l: float | None
    per_class: dict

    def to_dict(self):
        return {"map50": self.map50, "map5095": self.map5095, "ap_s": self.ap_s,
                "ap_m": self.ap_m, "ap_l": self.ap_l, "per_class": dict(self.per_class)}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self):
        """Aligned plain-text rendering."""
        def fmt(v):
            return "n/a" if v is None else f"{v:.4f}"

        rows = [("mAP@0.5", self.map50), ("mAP@0.5:0.95", self.map5095),
                ("AP_S", self.ap_s), ("AP_M", self.ap_m), ("AP_L", self.ap_l)]
        rows += [(f"AP50[{name}]", v) for name, v in self.per_class.items()]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {fmt(v):>7}" for name, v in rows) + "\n"


def _mean_over_classes(records, classes, thresholds, area_range, what):
    per_class = {}
    for c in classes:
        aps = [average_precision(records, c, t, area_range) for t in thresholds]
        if aps[0] is not None:
            per_class[c] = float(np.mean(aps))
    missing = [c for c in classes if c not in per_class]
    if missing and what == "all":
        warnings.warn(f"classes {missing} have no ground truth and are left out of the mean",
                      UndefinedMetricWarning, stacklevel=3)
    if not per_class:
        return None, per_class
    return float(np.mean(list(per_class.values()))), per_class


def map_range(records, class_names=None):
    """mAP@0.5, mAP@0.5:0.95 and the small/medium/large AP (0.5:0.95) as a :class:`MetricsReport`.

    Classes come from ``class_names`` (index = label) or, if omitted, from
    the labels present in the ground truth.
    """
    records = list(records)
    if class_names is None:
        labels = sorted({int(l) for r in records for l in r.gt_labels})
        class_names = {c: str(c) for c in labels}
    else:
        class_names = dict(enumerate(class_names))
    classes = list(class_names)
    map50, per50 = _mean_over_classes(records, classes, [0.5], AREA_RANGES["all"], "all")
    if map50 is None:
        raise ValueError("no class has ground truth; mAP is undefined")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UndefinedMetricWarning)
        map5095, _ = _mean_over_classes(records, classes, IOU_THRESHOLDS, AREA_RANGES["all"], "quiet")
        buckets = [_mean_over_classes(records, classes, IOU_THRESHOLDS, AREA_RANGES[b], b)[0]
                   for b in ("small", "medium", "large")]
    return MetricsReport(map50, map5095, *buckets,
                         per_class={class_names[c]: per50[c] for c in per50})


def records_from_jsonl(pred_path, gt_path, split=None, resolution=EVAL_RESOLUTION, class_names=None):
    """Pair prediction and ground-truth JSON-lines files into per-image records.

    Both files hold one object per box with ``image_id``, ``class`` (name or
    index) and a normalised ``box`` (cx, cy, w, h); predictions also carry a
    ``score``.  Ground-truth lines whose ``split`` differs from ``split`` are
    skipped when a split is given.
    """
    def label(v):
        if isinstance(v, str):
            if class_names is None:
                raise ValueError(f"class name {v!r} given without a class list")
            return list(class_names).index(v)
        return int(v)

    gts, preds = {}, {}
    with open(gt_path) as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                if split is None or r.get("split", split) == split:
                    gts.setdefault(int(r["image_id"]), []).append((r["box"], label(r["class"])))
    with open(pred_path) as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                preds.setdefault(int(r["image_id"]), []).append((r["box"], label(r["class"]), float(r["score"])))
    records = []
    for i in sorted(gts):
        g = gts[i]
        p = preds.get(i, [])
        records.append(EvalRecord.from_normalized(
            [b for b, _, _ in p], [s for _, _, s in p], [c for _, c, _ in p],
            [b for b, _ in g], [c for _, c in g], resolution))
    return records
