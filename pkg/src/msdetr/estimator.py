"""scikit-learn style wrapper around training, inference and scoring."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .config import RunConfig
from .data import CLASS_NAMES, Split, normalise
from .metrics import EvalRecord, map_range
from .model import ModelConfig, fuse_model, postprocess
from .train import train
from .validation import check_images, check_targets


class MSDETRDetector(BaseEstimator):
    """Set-prediction detector with an estimator interface.

    ``X`` is an (N, 3, H, W) array of images in [0, 1]; ``y`` a sequence of
    per-image targets, each a dict with normalised (cx, cy, w, h) ``boxes``
    and integer ``labels``.  ``model_params`` overrides fields of the
    default :class:`ModelConfig`.
    """

    def __init__(self, model_params=None, epochs=50, batch_size=8, lr=1e-4, weight_decay=1e-4,
                 warmup_steps=50, grad_clip=0.0, cls_lr_mult=1.0, flip_p=0.5, scale_jitter=(0.8, 1.2),
                 precision=64, top_k=100, random_state=0):
        self.model_params = model_params
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.grad_clip = grad_clip
        self.cls_lr_mult = cls_lr_mult
        self.flip_p = flip_p
        self.scale_jitter = scale_jitter
        self.precision = precision
        self.top_k = top_k
        self.random_state = random_state

    def _run_config(self, image_size):
        model = ModelConfig.from_dict({**(self.model_params or {}), "image_size": image_size})
        return RunConfig(model=model, seed=self.random_state, epochs=self.epochs,
                         batch_size=self.batch_size, lr=self.lr, weight_decay=self.weight_decay,
                         warmup_steps=self.warmup_steps, grad_clip=self.grad_clip,
                         cls_lr_mult=self.cls_lr_mult, flip_p=self.flip_p,
                         scale_jitter=self.scale_jitter, precision=self.precision,
                         top_k=self.top_k).validate()

    def fit(self, X, y, X_val=None, y_val=None):
        """Train from scratch.  With a validation set the best epoch by mAP@0.5 is kept, otherwise the last."""
        n_classes = (self.model_params or {}).get("n_classes", ModelConfig.n_classes)
        X = check_images(X)
        y = check_targets(y, len(X), n_classes)
        if X.shape[2] != X.shape[3]:
            raise ValueError(f"images must be square, got {X.shape[2]}x{X.shape[3]}")
        run = self._run_config(X.shape[2])
        if X_val is not None:
            X_val = check_images(X_val)
            y_val = check_targets(y_val, len(X_val), n_classes)
            val = Split(X_val, y_val, list(range(len(X_val))))
        else:
            val = Split(np.zeros((0,) + X.shape[1:]), [], [])
        result = train(run, {"train": Split(X, y, list(range(len(X)))), "val": val})
        self.model_ = result.model
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        return self

    def fuse(self):
        """Collapse every re-parameterisable block of the fitted model in place."""
        check_is_fitted(self, "model_")
        self.model_ = fuse_model(self.model_)
        return self

    def predict(self, X):
        """Per image: dict with ``boxes`` (cx, cy, w, h), ``scores`` and ``labels``."""
        check_is_fitted(self, "model_")
        X = check_images(X, 2 ** (self.model_.cfg.num_levels + 1))
        self.model_.eval()
        out = []
        with T.no_grad():
            for s in range(0, len(X), self.batch_size):
                batch = normalise(X[s:s + self.batch_size]).astype(self.model_.dtype)
                out.extend(postprocess(self.model_(batch), self.top_k))
        return out

    def score(self, X, y):
        """mAP@0.5 of the predictions on ``X`` against ``y``."""
        preds = self.predict(X)
        y = check_targets(y, len(preds))
        records = [EvalRecord.from_normalized(p["boxes"], p["scores"], p["labels"], gt.boxes, gt.labels)
                   for p, gt in zip(preds, y)]
        names = CLASS_NAMES if self.model_.cfg.n_classes == len(CLASS_NAMES) else None
        return map_range(records, names).map50
