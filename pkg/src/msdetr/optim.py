"""AdamW with a linear-warmup cosine learning-rate schedule."""

import math

import numpy as np


class WarmupCosine:
    """Learning rate rising linearly from 0 to ``peak`` over ``warmup`` steps,
    then following a half cosine down to ``peak * floor`` at ``total`` steps."""

    def __init__(self, peak, warmup, total, floor=0.0):
        if total < 1 or warmup < 0:
            raise ValueError("need total >= 1 and warmup >= 0")
        self.peak = float(peak)
        self.warmup = int(warmup)
        self.total = int(total)
        self.floor = float(floor)

    def __call__(self, step):
        if self.warmup and step < self.warmup:
            return self.peak * step / self.warmup
        span = max(self.total - self.warmup, 1)
        t = min(max(step - self.warmup, 0) / span, 1.0)
        low = self.peak * self.floor
        return low + 0.5 * (self.peak - low) * (1.0 + math.cos(math.pi * t))


class AdamW:
    """Adam moments with weight decay applied directly to the weights.

    Decay is skipped for one-dimensional parameters (biases, norm scales)
    unless ``decay_all`` is set.  ``lr_scale`` optionally gives one
    multiplier per parameter, applied to both the step and the decay.
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4, decay_all=False,
                 lr_scale=None):
        self.params = list(params)
        self.lr_scale = [1.0] * len(self.params) if lr_scale is None else [float(s) for s in lr_scale]
        if len(self.lr_scale) != len(self.params):
            raise ValueError(f"lr_scale has {len(self.lr_scale)} entries for {len(self.params)} parameters")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay_all = decay_all
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, m, v, scale in zip(self.params, self.m, self.v, self.lr_scale):
            if p.grad is None:
                continue
            g = p.grad
            p_lr = lr * scale
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay and (self.decay_all or p.data.ndim > 1):
                p.data = p.data * (1.0 - p_lr * self.weight_decay)
            p.data = p.data - (p_lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def clip_grad_norm(params, max_norm):
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the norm."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total
