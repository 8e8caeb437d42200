"""Compiled loops for multi-level deformable bilinear sampling.

Each sampling point reads the four surrounding pixels of its level; corners
outside the map count as reads but contribute zero.  The loops are serial so
results are bitwise reproducible.
"""

import threading

import numba
import numpy as np


class ReadCounter:
    """Thread-safe tally of feature-map corner reads."""

    def __init__(self):
        self._lock = threading.Lock()
        self.count = 0

    def add(self, n):
        with self._lock:
            self.count += int(n)

    def reset(self):
        with self._lock:
            self.count = 0


READ_COUNTER = ReadCounter()


@numba.vectorize(["float32(float32)", "float64(float64)"], cache=True)
def sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


@numba.njit(cache=True)
def silu_with_grad(x):
    """SiLU of ``x`` and its derivative, computed in one pass."""
    flat = x.ravel()
    out = np.empty_like(flat)
    deriv = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        if v >= 0:
            s = 1.0 / (1.0 + np.exp(-v))
        else:
            e = np.exp(v)
            s = e / (1.0 + e)
        out[i] = v * s
        deriv[i] = s + v * s * (1.0 - s)
    return out.reshape(x.shape), deriv.reshape(x.shape)


@numba.njit(cache=True)
def _corners(px, py):
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    return int(x0), int(y0), fx, fy


@numba.njit(cache=True)
def deform_forward(value, shapes, starts, loc, attn):
    B, Q, M, L, K, _ = loc.shape
    Dv = value.shape[3]
    out = np.zeros((B, Q, M, Dv), dtype=value.dtype)
    reads = 0
    for b in range(B):
        for q in range(Q):
            for m in range(M):
                for lv in range(L):
                    H = shapes[lv, 0]
                    W = shapes[lv, 1]
                    s0 = starts[lv]
                    for k in range(K):
                        a = attn[b, q, m, lv, k]
                        px = loc[b, q, m, lv, k, 0] * W - 0.5
                        py = loc[b, q, m, lv, k, 1] * H - 0.5
                        x0, y0, fx, fy = _corners(px, py)
                        reads += 4
                        for cy in range(2):
                            yy = y0 + cy
                            wy = fy if cy == 1 else 1.0 - fy
                            if yy < 0 or yy >= H:
                                continue
                            for cx in range(2):
                                xx = x0 + cx
                                if xx < 0 or xx >= W:
                                    continue
                                wx = fx if cx == 1 else 1.0 - fx
                                w = a * wx * wy
                                p = s0 + yy * W + xx
                                for c in range(Dv):
                                    out[b, q, m, c] += w * value[b, p, m, c]
    return out, reads


@numba.njit(cache=True)
def deform_backward(value, shapes, starts, loc, attn, grad):
    B, Q, M, L, K, _ = loc.shape
    Dv = value.shape[3]
    gv = np.zeros_like(value)
    gl = np.zeros_like(loc)
    ga = np.zeros_like(attn)
    for b in range(B):
        for q in range(Q):
            for m in range(M):
                for lv in range(L):
                    H = shapes[lv, 0]
                    W = shapes[lv, 1]
                    s0 = starts[lv]
                    for k in range(K):
                        a = attn[b, q, m, lv, k]
                        px = loc[b, q, m, lv, k, 0] * W - 0.5
                        py = loc[b, q, m, lv, k, 1] * H - 0.5
                        x0, y0, fx, fy = _corners(px, py)
                        gsample = 0.0
                        gpx = 0.0
                        gpy = 0.0
                        for cy in range(2):
                            yy = y0 + cy
                            if yy < 0 or yy >= H:
                                continue
                            wy = fy if cy == 1 else 1.0 - fy
                            dwy = 1.0 if cy == 1 else -1.0
                            for cx in range(2):
                                xx = x0 + cx
                                if xx < 0 or xx >= W:
                                    continue
                                wx = fx if cx == 1 else 1.0 - fx
                                dwx = 1.0 if cx == 1 else -1.0
                                p = s0 + yy * W + xx
                                dot = 0.0
                                for c in range(Dv):
                                    g = grad[b, q, m, c]
                                    dot += value[b, p, m, c] * g
                                    gv[b, p, m, c] += a * wx * wy * g
                                gsample += wx * wy * dot
                                gpx += dwx * wy * dot
                                gpy += wx * dwy * dot
                        ga[b, q, m, lv, k] = gsample
                        gl[b, q, m, lv, k, 0] = a * gpx * W
                        gl[b, q, m, lv, k, 1] = a * gpy * H
    return gv, gl, ga
