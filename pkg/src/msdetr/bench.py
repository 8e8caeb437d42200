"""Latency of a model before and after RepBlock fusion."""

from __future__ import annotations

import copy
import time

import numpy as np

from . import tensor as T
from .model import fuse_model, model_flops


def _percentiles(samples):
    a = np.asarray(samples, dtype=np.float64)
    return {"median_ms": float(np.median(a) * 1e3), "p95_ms": float(np.percentile(a, 95) * 1e3),
            "mean_ms": float(a.mean() * 1e3)}


def latency(models, images, warmup=20, iters=100):
    """Per-call wall time for each model in ``models`` on the same input.

    Calls are interleaved (model 0, model 1, ..., repeated) so slow drifts in
    machine load hit every model equally.  Returns one list of seconds per model.
    """
    with T.no_grad():
        for _ in range(warmup):
            for m in models:
                m(images)
        times = [[] for _ in models]
        for _ in range(iters):
            for k, m in enumerate(models):
                t0 = time.perf_counter()
                m(images)
                times[k].append(time.perf_counter() - t0)
    return times


def bench(model, image_size=None, batch=1, warmup=20, iters=100, seed=0):
    """Compare the model with its fused copy in 32-bit arithmetic.

    Reports median, p95 and mean latency per image, throughput, analytic
    FLOPs and the fused/unfused ratios.
    """
    size = image_size or model.cfg.image_size
    unfused32 = _as32(model)
    fused32 = _as32(fuse_model(model))
    x = np.random.default_rng(seed).uniform(-2, 2, size=(batch, 3, size, size)).astype(np.float32)
    times = latency([unfused32, fused32], x, warmup, iters)
    out = {"batch": batch, "image_size": size, "warmup": warmup, "iters": iters, "precision": 32}
    for name, m, t in (("unfused", unfused32, times[0]), ("fused", fused32, times[1])):
        stats = _percentiles(np.asarray(t) / batch)
        stats["throughput_ips"] = 1e3 / stats["median_ms"]
        stats["flops"] = int(model_flops(m, size, size))
        stats["params"] = m.num_parameters()
        out[name] = stats
    out["latency_ratio"] = out["fused"]["median_ms"] / out["unfused"]["median_ms"]
    out["flops_ratio"] = out["fused"]["flops"] / out["unfused"]["flops"]
    out["n_rep_blocks"] = len(model.rep_blocks())
    return out


def _as32(model):
    return copy.deepcopy(model).astype(np.float32).eval()


def bench_table(result):
    rows = [("", "unfused", "fused")]
    for key, label, fmt in (("median_ms", "median latency (ms)", "{:.3f}"), ("p95_ms", "p95 latency (ms)", "{:.3f}"),
                            ("throughput_ips", "throughput (img/s)", "{:.1f}"), ("flops", "FLOPs", "{:,}"),
                            ("params", "parameters", "{:,}")):
        rows.append((label, fmt.format(result["unfused"][key]), fmt.format(result["fused"][key])))
    w = [max(len(r[i]) for r in rows) for i in range(3)]
    lines = [f"{r[0]:<{w[0]}}  {r[1]:>{w[1]}}  {r[2]:>{w[2]}}" for r in rows]
    lines.append(f"fused/unfused latency {result['latency_ratio']:.3f}, FLOPs {result['flops_ratio']:.3f}")
    return "\n".join(lines) + "\n"
