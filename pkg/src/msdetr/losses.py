"""Box geometry, bipartite matching and the set-prediction objective."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .decoder import Detections

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0


@dataclass
class GroundTruth:
    """Normalised (cx, cy, w, h) boxes with integer labels in [0, C)."""

    boxes: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.labels):
            raise T.DimensionError("boxes and labels disagree in length")

    def __len__(self):
        return len(self.labels)


# -- geometry --------------------------------------------------------------------------

def box_convert(b):
    """(cx, cy, w, h) -> (x1, y1, x2, y2); works on arrays and tensors along the last axis."""
    if isinstance(b, T.Tensor):
        cx, cy, w, h = (T.index(b, (Ellipsis, i)) for i in range(4))
        return T.stack([cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5], axis=-1)
    b = np.asarray(b, dtype=np.float64)
    if np.any(b[..., 2:] < 0):
        raise T.DomainError("box width and height must be non-negative")
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def box_convert_inverse(b):
    """(x1, y1, x2, y2) -> (cx, cy, w, h)."""
    b = np.asarray(b, dtype=np.float64)
    x1, y1, x2, y2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def _area(b):
    return np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)


def iou(a, b):
    """IoU of xyxy boxes (broadcast along leading axes); zero union gives 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lt = np.maximum(a[..., :2], b[..., :2])
    rb = np.minimum(a[..., 2:], b[..., 2:])
    inter = np.prod(np.clip(rb - lt, 0, None), axis=-1)
    union = _area(a) + _area(b) - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def giou(a, b):
    """Generalised IoU of xyxy boxes, in (-1, 1].

    Two boxes whose enclosing hull has zero area (coincident points) get 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lt = np.maximum(a[..., :2], b[..., :2])
    rb = np.minimum(a[..., 2:], b[..., 2:])
    inter = np.prod(np.clip(rb - lt, 0, None), axis=-1)
    union = _area(a) + _area(b) - inter
    hull = np.prod(np.maximum(a[..., 2:], b[..., 2:]) - np.minimum(a[..., :2], b[..., :2]), axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        iou_ = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        # the hull contains the union; clamping keeps rounding from pushing GIoU above IoU
        penalty = np.clip(hull - union, 0.0, None) / np.where(hull > 0, hull, 1.0)
        out = np.where(hull > 0, iou_ - penalty, 0.0)
    return out[()] if out.ndim == 0 else out


def pairwise_giou(a, b):
    """(N, 4) x (M, 4) xyxy -> (N, M)."""
    return giou(np.asarray(a)[:, None, :], np.asarray(b)[None, :, :])


def giou_tensor(a, b):
    """Differentiable GIoU between matching rows of two (N, 4) xyxy tensors."""
    a, b = T.as_tensor(a), T.as_tensor(b, T.as_tensor(a).dtype)

    def col(t, i):
        return T.index(t, (Ellipsis, i))

    ax1, ay1, ax2, ay2 = (col(a, i) for i in range(4))
    bx1, by1, bx2, by2 = (col(b, i) for i in range(4))
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    iw = T.clip(T.minimum(ax2, bx2) - T.maximum(ax1, bx1), 0.0, None)
    ih = T.clip(T.minimum(ay2, by2) - T.maximum(ay1, by1), 0.0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    hull = (T.maximum(ax2, bx2) - T.minimum(ax1, bx1)) * (T.maximum(ay2, by2) - T.minimum(ay1, by1))
    tiny = 1e-12
    return inter / T.maximum(union, tiny) - (hull - union) / T.maximum(hull, tiny)


# -- losses ---------------------------------------------------------------------------------

def focal_loss(p, target, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA):
    """``-alpha (1 - p_t)^gamma log(p_t)`` with ``p_t`` clamped at 1e-12 before the log.

    ``p`` is a probability vector (or a stack of them along the last axis)
    and ``target`` the index (or indices) of the true class.  Returns the
    loss per row; a scalar for a single vector.
    """
    p = T.as_tensor(p)
    target = np.asarray(target)
    if p.ndim == 1:
        pt = T.index(p, int(target))
    else:
        pt = T.index(p, (np.arange(p.shape[0]), target.reshape(-1)))
    loss = (1.0 - pt) ** gamma * T.log(T.clip(pt, LOG_CLAMP, None)) * (-alpha)
    return loss


def l1_loss(pred, target):
    """Sum of absolute coordinate differences along the last axis."""
    pred = T.as_tensor(pred)
    return T.tsum(T.abs_(pred - T.as_tensor(target, pred.dtype)), axis=-1)


def _softmax_np(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def match_cost(class_logits, boxes, gt, weights=LossWeights()):
    """(N_q, N_gt) matching cost: ``-w_cls p(class) + w_l1 L1 + w_giou (1 - GIoU)``."""
    logits = np.asarray(class_logits.data if isinstance(class_logits, T.Tensor) else class_logits)
    boxes = np.asarray(boxes.data if isinstance(boxes, T.Tensor) else boxes, dtype=np.float64)
    if len(gt) == 0:
        raise ValueError("match_cost needs at least one ground-truth box")
    prob = _softmax_np(logits.astype(np.float64))
    cost_cls = -prob[:, gt.labels]
    cost_l1 = np.abs(boxes[:, None, :] - gt.boxes[None, :, :]).sum(-1)
    cost_giou = 1.0 - pairwise_giou(box_convert(boxes), box_convert(gt.boxes))
    return weights.cls * cost_cls + weights.l1 * cost_l1 + weights.giou * cost_giou


def hungarian(cost):
    """Minimum-cost one-to-one assignment (shortest augmenting path with potentials).

    Returns ``min(n_rows, n_cols)`` (row, col) pairs sorted by row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return []
    if not np.all(np.isfinite(cost)):
        raise ValueError("hungarian needs finite costs")
    transposed = cost.shape[0] > cost.shape[1]
    a = cost.T if transposed else cost
    n, m = a.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row matched to column j (1-based, 0 = free)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    pairs = [(int(p[j]) - 1, j - 1) for j in range(1, m + 1) if p[j]]
    if transposed:
        pairs = [(c, r) for r, c in pairs]
    return sorted(pairs)


def match(detections, gts, weights=LossWeights()):
    """Hungarian assignment per image for a batched :class:`Detections`."""
    logits, boxes = detections.class_logits.data, detections.boxes.data
    out = []
    for b, gt in enumerate(gts):
        out.append(hungarian(match_cost(logits[b], boxes[b], gt, weights)) if len(gt) else [])
    return out


def batch_loss(detections, gts, assignments, weights=LossWeights(),
               alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA):
    """Weighted focal + L1 + GIoU objective over a batch.

    The class term is averaged over every query of every image (unmatched
    queries target the background index C); the box terms are averaged over
    matched pairs.  Returns the scalar loss tensor and a float breakdown.
    """
    logits, boxes = detections.class_logits, detections.boxes
    B, Nq, C1 = logits.shape
    target = np.full((B, Nq), C1 - 1, dtype=np.int64)
    qi, bi, gt_boxes = [], [], []
    for b, (gt, pairs) in enumerate(zip(gts, assignments)):
        for q, j in pairs:
            target[b, q] = gt.labels[j]
            bi.append(b)
            qi.append(q)
            gt_boxes.append(gt.boxes[j])
    prob = T.softmax(logits, axis=-1)
    fl = focal_loss(T.reshape(prob, (B * Nq, C1)), target.reshape(-1), alpha, gamma)
    l_cls = T.mean(fl)
    if qi:
        pred = T.index(boxes, (np.array(bi), np.array(qi)))
        tgt = np.asarray(gt_boxes, dtype=boxes.dtype)
        l_l1 = T.mean(l1_loss(pred, tgt))
        g = giou_tensor(box_convert(pred), T.Tensor(box_convert(tgt).astype(boxes.dtype)))
        l_giou = T.mean(1.0 - g)
    else:
        zero = T.tsum(boxes) * 0.0
        l_l1 = l_giou = zero
    total = l_cls * weights.cls + l_l1 * weights.l1 + l_giou * weights.giou
    parts = {"cls": float(l_cls.data), "l1": float(l_l1.data), "giou": float(l_giou.data),
             "total": float(total.data)}
    return total, parts


def total_loss(detections, gt, assignment, weights=LossWeights()):
    """Objective for a single image; ``detections`` may be batched with B = 1 or unbatched."""
    logits, boxes = detections.class_logits, detections.boxes
    if logits.ndim == 2:
        detections = Detections(T.reshape(logits, (1,) + logits.shape), T.reshape(boxes, (1,) + boxes.shape))
    return batch_loss(detections, [gt], [assignment], weights)
