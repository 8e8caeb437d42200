"""Input checks shared by the estimator and the command line."""

import numpy as np

from .losses import GroundTruth


def check_images(X, divisor=1, dtype=np.float64):
    """Return ``X`` as a finite (N, 3, H, W) array.

    A single (3, H, W) image is promoted to a batch of one.  Height and
    width must be multiples of ``divisor``.
    """
    X = np.asarray(X)
    if X.dtype.kind not in "fiu":
        raise TypeError(f"images must be numeric, got dtype {X.dtype}")
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"images must have shape (N, 3, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no images given")
    if X.shape[2] % divisor or X.shape[3] % divisor:
        raise ValueError(f"image height and width must be multiples of {divisor}, got {X.shape[2]}x{X.shape[3]}")
    X = X.astype(dtype, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinite values")
    return X


def _as_ground_truth(t, i):
    if isinstance(t, GroundTruth):
        return t
    if isinstance(t, dict):
        try:
            return GroundTruth(t["boxes"], t["labels"])
        except KeyError as exc:
            raise ValueError(f"target {i} lacks key {exc}") from None
    if isinstance(t, (tuple, list)) and len(t) == 2:
        return GroundTruth(*t)
    raise TypeError(f"target {i} must be a GroundTruth, a dict with boxes/labels or a (boxes, labels) pair")


def check_targets(y, n_images=None, n_classes=None):
    """Normalise per-image targets to :class:`GroundTruth` and check their contents.

    Boxes are normalised (cx, cy, w, h): centres in [0, 1], sizes in (0, 1].
    """
    y = [_as_ground_truth(t, i) for i, t in enumerate(y)]
    if n_images is not None and len(y) != n_images:
        raise ValueError(f"got {len(y)} targets for {n_images} images")
    for i, gt in enumerate(y):
        b = gt.boxes
        if not np.all(np.isfinite(b)):
            raise ValueError(f"target {i}: boxes must be finite")
        if np.any((b[:, :2] < 0) | (b[:, :2] > 1)):
            raise ValueError(f"target {i}: box centres must lie in [0, 1]")
        if np.any((b[:, 2:] <= 0) | (b[:, 2:] > 1)):
            raise ValueError(f"target {i}: box width and height must lie in (0, 1]")
        if n_classes is not None and np.any((gt.labels < 0) | (gt.labels >= n_classes)):
            raise ValueError(f"target {i}: labels must lie in [0, {n_classes})")
    return y
