"""Synthetic surface-defect scenes, on-disk dataset I/O and augmentation.

Each scene is a textured grey plate with one to eight defects drawn from
five renderable primitives.  Boxes are the tight pixel extent of each
primitive's coverage mask, stored as normalised (cx, cy, w, h).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .losses import GroundTruth
from .tensor import _resize_matrix

CLASS_NAMES = ("crack", "corrosion", "decarburization", "scratch", "pit")
ANNOTATIONS = "annotations.jsonl"
META = "dataset.json"
SPLITS = ("train", "val", "test")

# per-channel normalisation applied before images enter the network
INPUT_MEAN = 0.5
INPUT_STD = 0.25


@dataclass
class Scene:
    image: np.ndarray        # (3, H, W) float64 in [0, 1], quantised to 8 bits
    boxes: np.ndarray        # (n, 4) normalised cx, cy, w, h
    labels: np.ndarray       # (n,) int64
    masks: list              # per-instance boolean (H, W) coverage masks

    @property
    def gt(self):
        return GroundTruth(self.boxes, self.labels)


# -- rasterisation -----------------------------------------------------------------

def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return xx + 0.5, yy + 0.5


def _segment_distance(xx, yy, p0, p1):
    d = np.subtract(p1, p0)
    t = ((xx - p0[0]) * d[0] + (yy - p0[1]) * d[1]) / max(float(d @ d), 1e-12)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(xx - (p0[0] + t * d[0]), yy - (p0[1] + t * d[1]))


def _coverage(dist, radius):
    """Anti-aliased coverage of a shape whose signed edge sits at ``radius``."""
    return np.clip(radius + 0.5 - dist, 0.0, 1.0)


def _polyline(xx, yy, points, width):
    alpha = np.zeros_like(xx)
    for p0, p1 in zip(points[:-1], points[1:]):
        alpha = np.maximum(alpha, _coverage(_segment_distance(xx, yy, p0, p1), width / 2))
    return alpha


def _crack(rng, xx, yy, size):
    length = rng.uniform(0.25, 0.45) * size
    angle = rng.choice([-1, 1]) * rng.uniform(np.radians(25), np.radians(65))
    c = rng.uniform(length / 2 + 2, size - length / 2 - 2, size=2)
    u = np.array([np.cos(angle), np.sin(angle)])
    n = np.array([-u[1], u[0]])
    ts = np.linspace(-0.5, 0.5, 4) * length
    jitter = rng.uniform(-2.0, 2.0, size=4) * np.array([0, 1, 1, 0])
    points = [c + t * u + j * n for t, j in zip(ts, jitter)]
    return _polyline(xx, yy, points, rng.uniform(1.5, 2.5)), np.array([0.08, 0.07, 0.07])


def _corrosion(rng, xx, yy, size):
    r = rng.uniform(0.06, 0.13) * size
    c = rng.uniform(2 * r + 2, size - 2 * r - 2, size=2)
    alpha = np.zeros_like(xx)
    for _ in range(rng.integers(3, 7)):
        off = rng.normal(0.0, 0.45 * r, size=2)
        rad = rng.uniform(0.5, 0.9) * r
        alpha = np.maximum(alpha, _coverage(np.hypot(xx - c[0] - off[0], yy - c[1] - off[1]), rad))
    return alpha, np.array([0.62, 0.30, 0.10])


def _decarburization(rng, xx, yy, size):
    w, h = rng.uniform(0.14, 0.28, size=2) * size
    c = rng.uniform([w / 2 + 2, h / 2 + 2], [size - w / 2 - 2, size - h / 2 - 2])
    dx = np.abs(xx - c[0]) - w / 2
    dy = np.abs(yy - c[1]) - h / 2
    dist = np.hypot(np.maximum(dx, 0), np.maximum(dy, 0)) + np.minimum(np.maximum(dx, dy), 0)
    return _coverage(dist, 0.0) * 0.85, np.array([0.66, 0.68, 0.76])


def _scratch(rng, xx, yy, size):
    length = rng.uniform(0.3, 0.5) * size
    angle = rng.uniform(np.radians(4), np.radians(12)) * rng.choice([-1, 1])
    if rng.uniform() < 0.5:
        angle += np.pi / 2
    u = np.array([np.cos(angle), np.sin(angle)])
    half = np.abs(u) * length / 2
    c = rng.uniform(half + 2, size - half - 2)
    return _polyline(xx, yy, [c - u * length / 2, c + u * length / 2], rng.uniform(1.5, 2.2)), \
        np.array([0.93, 0.93, 0.90])


def _pit(rng, xx, yy, size):
    r = rng.uniform(3.5, 6.5) * size / 128
    c = rng.uniform(r + 2, size - r - 2, size=2)
    return _coverage(np.hypot(xx - c[0], yy - c[1]), r), np.array([0.12, 0.09, 0.08])


_PAINTERS = (_crack, _corrosion, _decarburization, _scratch, _pit)


def _background(rng, size):
    base = rng.uniform(0.38, 0.52)
    coarse = rng.normal(0.0, 0.05, size=(1, size // 16 + 1, size // 16 + 1))
    R = _resize_matrix(coarse.shape[1], size, np.float64)
    low = R @ coarse @ R.T
    grain = rng.normal(0.0, 0.03, size=(1, size, size))
    tint = np.array([1.0, 1.0, 1.04]).reshape(3, 1, 1)
    return np.clip((base + low + grain) * tint, 0.0, 1.0)


def _mask_box(mask, size):
    ys, xs = np.nonzero(mask)
    x0, x1 = xs.min(), xs.max() + 1
    y0, y1 = ys.min(), ys.max() + 1
    return np.array([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dtype=np.float64) / size


def _xyxy(b):
    return np.concatenate([b[:2] - b[2:] / 2, b[:2] + b[2:] / 2])


def _overlap(a, b):
    a, b = _xyxy(a), _xyxy(b)
    inter = np.prod(np.clip(np.minimum(a[2:], b[2:]) - np.maximum(a[:2], b[:2]), 0, None))
    return inter / min(np.prod(a[2:] - a[:2]), np.prod(b[2:] - b[:2]))


def render_scene(rng, classes, size=128, max_overlap=0.15, tries=40):
    """Paint one instance per entry of ``classes`` onto a fresh background.

    Placements overlapping an earlier instance by more than ``max_overlap``
    (intersection over the smaller box) are redrawn; after ``tries`` failures
    the instance is dropped, except that the first is always kept.
    """
    xx, yy = _grid(size)
    image = _background(rng, size)
    boxes, labels, masks = [], [], []
    for cls in classes:
        for _ in range(tries):
            alpha, colour = _PAINTERS[cls](rng, xx, yy, size)
            mask = alpha > 0
            box = _mask_box(mask, size)
            if all(_overlap(box, b) <= max_overlap for b in boxes):
                break
        else:
            continue
        shade = colour.reshape(3, 1, 1) + rng.normal(0.0, 0.02, size=(3, 1, 1))
        image = image * (1 - alpha) + shade * alpha
        boxes.append(box)
        labels.append(cls)
        masks.append(mask)
    image = np.round(np.clip(image, 0.0, 1.0) * 255) / 255
    return Scene(image, np.asarray(boxes).reshape(-1, 4), np.asarray(labels, dtype=np.int64), masks)


# -- dataset generation ----------------------------------------------------------------

def split_counts(n_images, ratios):
    ratios = np.asarray(ratios, dtype=np.float64)
    counts = np.floor(ratios * n_images + 0.5).astype(int)
    counts[-1] = n_images - counts[:-1].sum()
    return counts


def class_schedule(rng, n_instances, n_classes=len(CLASS_NAMES)):
    """Class for each of ``n_instances``: concatenated random permutations, so counts stay balanced."""
    reps = -(-n_instances // n_classes)
    return np.concatenate([rng.permutation(n_classes) for _ in range(reps)])[:n_instances]


def stratified_split(strata, ratios, rng):
    """Split indices so each stratum is spread over the splits in proportion to ``ratios``.

    Items are visited stratum by stratum (shuffled within each) and each goes
    to the split lagging furthest behind its target share.
    """
    strata = np.asarray(strata)
    targets = np.asarray(ratios, dtype=np.float64)
    counts = split_counts(len(strata), ratios)
    order = np.concatenate([rng.permutation(np.flatnonzero(strata == s)) for s in np.unique(strata)])
    assigned = np.zeros(len(ratios), dtype=int)
    split = np.empty(len(strata), dtype=np.int64)
    for seen, idx in enumerate(order, start=1):
        deficit = targets * seen - assigned
        deficit[assigned >= counts] = -np.inf
        k = int(np.argmax(deficit))
        split[idx] = k
        assigned[k] += 1
    return split


def generate(n_images, image_size=128, seed=0, ratios=(0.70, 0.15, 0.15), min_instances=1, max_instances=8):
    """Deterministic list of ``(scene, split_index)`` pairs.

    Instance counts and classes come from one seeded stream; every image is
    then painted from its own stream keyed by (seed, index), so rendering is
    order independent.
    """
    if not 1 <= min_instances <= max_instances <= 8:
        raise ValueError("instance counts must satisfy 1 <= min <= max <= 8")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {sum(ratios)}")
    rng = np.random.default_rng(seed)
    counts = rng.integers(min_instances, max_instances + 1, size=n_images)
    schedule = class_schedule(rng, int(counts.sum()))
    per_image = np.split(schedule, np.cumsum(counts)[:-1])
    scenes = [render_scene(np.random.default_rng([seed, i]), classes, image_size)
              for i, classes in enumerate(per_image)]
    split = stratified_split([s.labels[0] for s in scenes], ratios, rng)
    return list(zip(scenes, split.tolist()))


def write_dataset(pairs, out_dir, seed=None):
    """PNG per image plus one JSON line per instance, and a small metadata file."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    lines = []
    size = None
    for i, (scene, split) in enumerate(pairs):
        size = scene.image.shape[1]
        pixels = np.round(scene.image.transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(pixels).save(os.path.join(out_dir, "images", f"{i:05d}.png"))
        for box, label in zip(scene.boxes, scene.labels):
            lines.append(json.dumps({"image_id": i, "split": SPLITS[split], "class": CLASS_NAMES[label],
                                     "box": [round(float(v), 8) for v in box]}))
    with open(os.path.join(out_dir, ANNOTATIONS), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    meta = {"classes": list(CLASS_NAMES), "image_size": size, "n_images": len(pairs), "seed": seed,
            "splits": {name: sum(1 for _, s in pairs if s == k) for k, name in enumerate(SPLITS)}}
    with open(os.path.join(out_dir, META), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class Split:
    images: np.ndarray       # (N, 3, H, W) float64 in [0, 1]
    targets: list            # GroundTruth per image
    ids: list

    def __len__(self):
        return len(self.ids)


def read_annotations(path):
    """Group a JSON-lines annotation file by image id."""
    by_image = {}
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                label = CLASS_NAMES.index(rec["class"]) if isinstance(rec["class"], str) else int(rec["class"])
                by_image.setdefault(int(rec["image_id"]), []).append((label, rec["box"], rec))
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{n}: malformed annotation ({exc})") from None
    return by_image


def load_dataset(data_dir):
    """Read a directory written by :func:`write_dataset` into per-split arrays."""
    with open(os.path.join(data_dir, META)) as fh:
        meta = json.load(fh)
    anns = read_annotations(os.path.join(data_dir, ANNOTATIONS))
    groups = {name: ([], [], []) for name in SPLITS}
    for i in range(meta["n_images"]):
        recs = anns.get(i, [])
        split = recs[0][2]["split"] if recs else "train"
        with Image.open(os.path.join(data_dir, "images", f"{i:05d}.png")) as im:
            pixels = np.asarray(im.convert("RGB"), dtype=np.float64) / 255
        imgs, tgts, ids = groups[split]
        imgs.append(pixels.transpose(2, 0, 1))
        tgts.append(GroundTruth(np.array([r[1] for r in recs]).reshape(-1, 4), [r[0] for r in recs]))
        ids.append(i)
    size = meta["image_size"]
    return {name: Split(np.stack(imgs) if imgs else np.zeros((0, 3, size, size)), tgts, ids)
            for name, (imgs, tgts, ids) in groups.items()}


# -- augmentation ----------------------------------------------------------------------

def hflip(image, boxes):
    boxes = boxes.copy()
    boxes[:, 0] = 1.0 - boxes[:, 0]
    return image[:, :, ::-1].copy(), boxes


def scale_jitter(image, boxes, labels, scale, offset, min_keep=0.3):
    """Resize by ``scale`` then crop or pad (with the image mean) back to the original size.

    ``offset`` in [0, 1]^2 picks where the crop or paste lands.  Boxes are
    clipped to the frame and dropped when less than ``min_keep`` of their
    area survives.
    """
    _, H, W = image.shape
    nh, nw = max(1, int(round(H * scale))), max(1, int(round(W * scale)))
    resized = _resize_matrix(H, nh, image.dtype) @ image @ _resize_matrix(W, nw, image.dtype).T
    oy = int(round(offset[1] * abs(nh - H)))
    ox = int(round(offset[0] * abs(nw - W)))
    if nh >= H:
        out_y, src_y, sy = slice(0, H), slice(oy, oy + H), -oy
    else:
        out_y, src_y, sy = slice(oy, oy + nh), slice(0, nh), oy
    if nw >= W:
        out_x, src_x, sx = slice(0, W), slice(ox, ox + W), -ox
    else:
        out_x, src_x, sx = slice(ox, ox + nw), slice(0, nw), ox
    out = np.empty_like(image)
    out[...] = image.mean(axis=(1, 2), keepdims=True)
    out[:, out_y, out_x] = resized[:, src_y, src_x]

    px = np.concatenate([boxes[:, :2] - boxes[:, 2:] / 2, boxes[:, :2] + boxes[:, 2:] / 2], axis=1)
    px = px * np.array([nw, nh, nw, nh]) + np.array([sx, sy, sx, sy])
    area = np.prod(px[:, 2:] - px[:, :2], axis=1)
    clipped = np.clip(px, 0, np.array([W, H, W, H]))
    kept_area = np.prod(np.clip(clipped[:, 2:] - clipped[:, :2], 0, None), axis=1)
    keep = kept_area >= min_keep * np.maximum(area, 1e-12)
    c = clipped[keep] / np.array([W, H, W, H])
    new = np.concatenate([(c[:, :2] + c[:, 2:]) / 2, c[:, 2:] - c[:, :2]], axis=1)
    return out, new, labels[keep]


def augment(image, gt, rng, flip_p=0.5, jitter=(0.8, 1.2)):
    boxes, labels = gt.boxes, gt.labels
    if flip_p and rng.uniform() < flip_p:
        image, boxes = hflip(image, boxes)
    if jitter is not None and tuple(jitter) != (1.0, 1.0):
        image, boxes, labels = scale_jitter(image, boxes, labels, rng.uniform(*jitter), rng.uniform(size=2))
    return image, GroundTruth(boxes, labels)


def normalise(images):
    return (images - INPUT_MEAN) / INPUT_STD
