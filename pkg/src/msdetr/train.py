"""Training loop, held-out evaluation and prediction export."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import tensor as T
from .data import CLASS_NAMES, augment, generate, load_dataset, normalise, Split
from .losses import batch_loss, match
from .metrics import EvalRecord, map_range
from .model import build, postprocess
from .optim import AdamW, WarmupCosine, clip_grad_norm

log = logging.getLogger("msdetr")

BEST_CHECKPOINT = "best.msdk"
LAST_GOOD_CHECKPOINT = "last_good.msdk"
TRAIN_LOG = "train_log.jsonl"
# the class head needs far larger weights than the shared trunk; see RunConfig.cls_lr_mult
CLASS_HEAD = "decoder.heads.cls."


class TrainingDiverged(RuntimeError):
    """Raised when the loss or its gradient stops being finite."""


@dataclass
class TrainResult:
    model: object
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_map50: float = float("nan")
    checkpoint: str | None = None


def splits_from_generator(run):
    """Generate the synthetic dataset in memory, split exactly as on disk."""
    pairs = generate(run.n_images, run.model.image_size, run.seed, run.split_ratios,
                     run.min_instances, run.max_instances)
    out = {}
    for k, name in enumerate(("train", "val", "test")):
        chosen = [(i, s) for i, (s, sp) in enumerate(pairs) if sp == k]
        size = run.model.image_size
        images = np.stack([s.image for _, s in chosen]) if chosen else np.zeros((0, 3, size, size))
        out[name] = Split(images, [s.gt for _, s in chosen], [i for i, _ in chosen])
    return out


def load_splits(run, data_dir=None):
    return load_dataset(data_dir) if data_dir else splits_from_generator(run)


def _objective(model, images, targets):
    """Total loss (summed over decoder layers when auxiliary losses are on) and a breakdown of the last layer."""
    if model.cfg.aux_loss:
        outs = model(images, return_all=True)
    else:
        outs = [model(images)]
    if not all(np.all(np.isfinite(d.class_logits.data)) and np.all(np.isfinite(d.boxes.data)) for d in outs):
        # matching needs finite costs; let the caller treat this as divergence
        return None, {"objective": float("nan")}, outs[-1]
    total, parts = None, None
    for det in outs:
        loss, parts = batch_loss(det, targets, match(det, targets))
        total = loss if total is None else total + loss
    parts = dict(parts, objective=float(total.data))
    return total, parts, outs[-1]


def _batches(n, batch_size, order=None):
    order = np.arange(n) if order is None else order
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def evaluate(model, split, batch_size=8, top_k=100):
    """Mean held-out loss breakdown, metrics report and per-image detections."""
    was_training = model.training
    model.eval()
    sums, n_batches, dets = {}, 0, []
    try:
        with T.no_grad():
            for idx in _batches(len(split), batch_size):
                images = normalise(split.images[idx]).astype(model.dtype)
                targets = [split.targets[i] for i in idx]
                _, parts, det = _objective(model, images, targets)
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v * len(idx)
                n_batches += len(idx)
                dets.extend(postprocess(det, top_k))
    finally:
        model.train(was_training)
    losses = {k: v / max(n_batches, 1) for k, v in sums.items()}
    records = [EvalRecord.from_normalized(d["boxes"], d["scores"], d["labels"], gt.boxes, gt.labels)
               for d, gt in zip(dets, split.targets)]
    report = map_range(records, CLASS_NAMES) if any(len(gt) for gt in split.targets) else None
    return losses, report, dets


def predictions_jsonl(dets, ids):
    """One JSON line per detection: image_id, class, score, normalised cxcywh box."""
    lines = []
    for d, i in zip(dets, ids):
        for box, score, label in zip(d["boxes"], d["scores"], d["labels"]):
            lines.append(json.dumps({"image_id": int(i), "class": CLASS_NAMES[int(label)],
                                     "score": round(float(score), 8),
                                     "box": [round(float(v), 8) for v in box]}))
    return "\n".join(lines) + ("\n" if lines else "")


def _finite_grads(params):
    return all(p.grad is None or np.all(np.isfinite(p.grad)) for p in params)


def _diverged(model, last_good, out_dir, seed, epoch, what):
    model.load_state_dict(last_good)
    path = None
    if out_dir:
        path = os.path.join(out_dir, LAST_GOOD_CHECKPOINT)
        checkpoint.save_model(path, model, {"epoch": epoch - 1, "seed": seed})
    raise TrainingDiverged(f"{what}; last good weights: {path}")


def train(run, splits=None, out_dir=None, data_dir=None, epochs=None, log_fn=None):
    """Fit a freshly built model; keeps the weights with the best validation mAP@0.5.

    Every random choice (initialisation, shuffling, augmentation) derives
    from ``run.seed``.  Writes ``best.msdk`` and ``train_log.jsonl`` to
    ``out_dir`` when given.  A non-finite loss or gradient saves the last
    finite weights and raises :class:`TrainingDiverged`.
    """
    run.validate()
    splits = splits or load_splits(run, data_dir)
    train_split, val_split = splits["train"], splits["val"]
    if len(train_split) == 0:
        raise ValueError("training split is empty")
    epochs = epochs or run.epochs
    model = build(run.model, run.seed).astype(np.dtype(run.dtype))
    named = list(model.named_parameters())
    params = [p for _, p in named]
    scales = [run.cls_lr_mult if name.startswith(CLASS_HEAD) else 1.0 for name, _ in named]
    opt = AdamW(params, run.lr, run.betas, weight_decay=run.weight_decay, lr_scale=scales)
    steps_per_epoch = math.ceil(len(train_split) / run.batch_size)
    schedule = WarmupCosine(run.lr, run.warmup_steps, epochs * steps_per_epoch, run.lr_floor)
    rng = np.random.default_rng([run.seed, 1])
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        open(os.path.join(out_dir, TRAIN_LOG), "w").close()

    result = TrainResult(model)
    best_key, best_state = None, None
    last_good = model.state_dict()
    last_good = {k: v.copy() for k, v in last_good.items()}
    step = 0
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        model.train()
        sums = {}
        for idx in _batches(len(train_split), run.batch_size, rng.permutation(len(train_split))):
            imgs, targets = [], []
            for i in idx:
                im, gt = augment(train_split.images[i], train_split.targets[i], rng, run.flip_p, run.scale_jitter)
                imgs.append(im)
                targets.append(gt)
            images = normalise(np.stack(imgs)).astype(model.dtype)
            lr = schedule(step)
            total, parts, _ = _objective(model, images, targets)
            opt.zero_grad()
            if np.isfinite(parts["objective"]):
                total.backward()
            if not np.isfinite(parts["objective"]) or not _finite_grads(params):
                _diverged(model, last_good, out_dir, run.seed, epoch,
                          f"non-finite loss or gradient at epoch {epoch}, step {step} "
                          f"(lr={lr:.3g}, loss parts={parts})")
            if run.grad_clip:
                clip_grad_norm(params, run.grad_clip)
            opt.step(lr)
            step += 1
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
        if not all(np.all(np.isfinite(p.data)) for p in params):
            _diverged(model, last_good, out_dir, run.seed, epoch, f"non-finite weights after epoch {epoch}")
        train_losses = {k: v / len(train_split) for k, v in sums.items()}
        last_good = {k: v.copy() for k, v in model.state_dict().items()}

        if len(val_split):
            val_losses, report, _ = evaluate(model, val_split, run.batch_size, run.top_k)
            val_map = report.map50 if report else 0.0
        else:
            val_losses, val_map = {"objective": float("nan")}, 0.0
        entry = {"epoch": epoch, "lr": schedule(step),
                 **{f"train_{k}": v for k, v in train_losses.items()},
                 **{f"val_{k}": v for k, v in val_losses.items()},
                 "val_map50": val_map, "seconds": time.perf_counter() - t0}
        result.history.append(entry)
        key = (val_map, -val_losses["objective"]) if len(val_split) else (epoch,)
        if best_key is None or key > best_key:
            best_key, best_state = key, {k: v.copy() for k, v in model.state_dict().items()}
            result.best_epoch, result.best_map50 = epoch, val_map
        msg = (f"epoch {epoch:3d}  loss {train_losses['objective']:.4f} (cls {train_losses['cls']:.4f} "
               f"l1 {train_losses['l1']:.4f} giou {train_losses['giou']:.4f})  "
               f"val {val_losses['objective']:.4f}  mAP50 {val_map:.4f}  {entry['seconds']:.1f}s")
        (log_fn or log.info)(msg)
        if out_dir:
            with open(os.path.join(out_dir, TRAIN_LOG), "a") as fh:
                fh.write(json.dumps({k: v for k, v in entry.items() if k != "seconds"}, sort_keys=True) + "\n")

    model.load_state_dict(best_state)
    model.eval()
    if out_dir:
        result.checkpoint = os.path.join(out_dir, BEST_CHECKPOINT)
        checkpoint.save_model(result.checkpoint, model,
                              {"epoch": result.best_epoch, "val_map50": result.best_map50, "seed": run.seed})
    return result
