"""Multi-scale deformable attention and the encoder layer built on it.

Sampling offsets are in normalised image units and are added to the query's
reference point; every level then maps the same normalised location into its
own pixel grid.  Attention weights are a softmax over the flattened
(levels, points) slots of each head, so every head's weights sum to one.
"""

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, Parameter, sine_position_embedding


class MSDeformAttn(Module):
    """Query-conditioned sparse attention over ``n_levels`` feature maps.

    Parameters
    ----------
    d_model : int
        Query and feature width; must be divisible by ``n_heads``.
    n_heads, n_levels, n_points : int
        Heads M, levels L and sampling points K per head and level.
    init_shapes : list of (H, W), optional
        Level sizes used to place the initial sampling ring one pixel away
        from the reference point.  Defaults to a 32-pixel base map.
    """

    def __init__(self, d_model, n_heads=8, n_levels=4, n_points=4, init_shapes=None, rng=None):
        super().__init__()
        if d_model % n_heads:
            raise T.DimensionError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_levels = n_levels
        self.n_points = n_points
        self.d_value = d_model // n_heads
        self.value_proj = Linear(d_model, d_model, rng)
        self.out_proj = Linear(d_model, d_model, rng)
        self.offset_head = Linear(d_model, 2 * n_heads * n_levels * n_points, rng)
        self.weight_head = Linear(d_model, n_heads * n_levels * n_points, rng)
        self.offset_head.weight.data[:] = 0.0
        self.offset_head.bias.data[:] = ring_offsets(n_heads, n_levels, n_points, init_shapes).reshape(-1)
        self.weight_head.weight.data[:] = 0.0

    def predict_offsets(self, query):
        """(..., d) -> (..., M, L, K, 2) offsets in normalised units."""
        off = self.offset_head(query)
        return T.reshape(off, query.shape[:-1] + (self.n_heads, self.n_levels, self.n_points, 2))

    def predict_weights(self, query):
        """(..., d) -> (..., M, L, K); each head's L*K weights sum to one."""
        lead = query.shape[:-1]
        s = self.weight_head(query)
        s = T.reshape(s, lead + (self.n_heads, self.n_levels * self.n_points))
        a = T.softmax(s, axis=-1)
        return T.reshape(a, lead + (self.n_heads, self.n_levels, self.n_points))

    def project_values(self, levels):
        """Flatten BCHW levels into the (B, P, M, Dv) layout the sampler reads."""
        B = levels[0].shape[0]
        flat = [T.reshape(T.transpose(x, (0, 2, 3, 1)), (B, x.shape[2] * x.shape[3], x.shape[1]))
                for x in levels]
        src = flat[0] if len(flat) == 1 else T.concat(flat, axis=1)
        v = self.value_proj(src)
        return T.reshape(v, (B, src.shape[1], self.n_heads, self.d_value))

    def forward(self, query, ref, levels, value=None):
        """
        query : (B, Q, d);  ref : (B, Q, 2) or (Q, 2) normalised (x, y)
        levels: list of (B, d, H_l, W_l) tensors.
        value : optional pre-projected values from :meth:`project_values`.
        """
        query = T.as_tensor(query)
        if len(levels) != self.n_levels:
            raise T.DimensionError(f"got {len(levels)} levels, attention configured for {self.n_levels}")
        for lv in levels:
            if lv.shape[1] != self.d_model:
                raise T.DimensionError(f"level width {lv.shape[1]} != d_model {self.d_model}")
        if query.shape[-1] != self.d_model:
            raise T.DimensionError(f"query width {query.shape[-1]} != d_model {self.d_model}")
        B, Q, _ = query.shape
        shapes = [(lv.shape[2], lv.shape[3]) for lv in levels]
        if value is None:
            value = self.project_values(levels)
        ref = T.as_tensor(ref, query.dtype)
        if ref.ndim == 2:
            ref = T.reshape(ref, (1, Q, 2))
        loc = T.reshape(ref, (ref.shape[0], Q, 1, 1, 1, 2)) + self.predict_offsets(query)
        attn = self.predict_weights(query)
        sampled = T.ms_deform_sample(value, shapes, loc, attn)
        return self.out_proj(T.reshape(sampled, (B, Q, self.d_model)))

    def reads_per_query(self):
        return self.n_heads * self.n_levels * self.n_points * 4


def ring_offsets(n_heads, n_levels, n_points, shapes=None):
    """Initial offsets: K points on a one-pixel ring per head, rotated between heads."""
    if shapes is None:
        shapes = [(32 // 2 ** l, 32 // 2 ** l) for l in range(n_levels)]
    off = np.zeros((n_heads, n_levels, n_points, 2))
    for m in range(n_heads):
        for k in range(n_points):
            theta = 2.0 * np.pi * (k / n_points + m / (n_heads * n_points))
            for lv, (h, w) in enumerate(shapes):
                off[m, lv, k] = (np.cos(theta) / max(w, 1), np.sin(theta) / max(h, 1))
    return off


# -- per-query operations ---------------------------------------------------------

def predict_offsets(params, z_q):
    """Offsets for one query vector, shaped (M, L, K, 2)."""
    z = T.reshape(T.as_tensor(z_q), (1, params.d_model))
    out = params.predict_offsets(z)
    return T.reshape(out, out.shape[1:])


def predict_weights(params, z_q):
    """Attention weights for one query vector, shaped (M, L, K)."""
    z = T.reshape(T.as_tensor(z_q), (1, params.d_model))
    out = params.predict_weights(z)
    return T.reshape(out, out.shape[1:])


def ms_deform_attn(params, z_q, ref, levels):
    """Multi-scale deformable attention for a single query; returns a d-vector."""
    if len(levels) != params.n_levels:
        raise T.DimensionError(f"got {len(levels)} levels, attention configured for {params.n_levels}")
    z = T.reshape(T.as_tensor(z_q), (1, 1, params.d_model))
    r = T.reshape(T.as_tensor(ref, z.dtype), (1, 2))
    out = params(z, r, [T.as_tensor(lv) for lv in levels])
    return T.reshape(out, (params.d_model,))


def deform_attn(params, z_q, ref, x_feat):
    """Single-scale deformable attention; ``params`` must have one level."""
    if params.n_levels != 1:
        raise T.DimensionError("deform_attn needs a single-level configuration")
    return ms_deform_attn(params, z_q, ref, [x_feat])


# -- encoder ---------------------------------------------------------------------------

def pixel_reference_points(shapes):
    """Normalised pixel-centre coordinates of every location, levels concatenated."""
    refs = []
    for h, w in shapes:
        ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
        refs.append(np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1))
    return np.concatenate(refs, axis=0)


class FeedForward(Module):
    def __init__(self, d_model, hidden, rng=None):
        super().__init__()
        self.fc1 = Linear(d_model, hidden, rng)
        self.fc2 = Linear(hidden, d_model, rng)

    def forward(self, x):
        return self.fc2(T.silu(self.fc1(x)))


class EncoderLayer(Module):
    """Every location of every level queries the pyramid at its own position.

    ``x = LN(x + MSDeformAttn(x + pos, ref, x))`` then ``x = LN(x + FFN(x))``.
    """

    def __init__(self, d_model, n_heads, n_levels, n_points, ffn_dim=None, init_shapes=None, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_model = d_model
        self.attn = MSDeformAttn(d_model, n_heads, n_levels, n_points, init_shapes, rng)
        self.norm1 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ffn_dim or 4 * d_model, rng)
        self.norm2 = LayerNorm(d_model)
        self.level_embed = Parameter(rng.normal(0.0, 0.02, size=(n_levels, d_model)))
        self._pos_cache = {}

    def _position(self, shapes, dtype):
        key = (tuple(shapes), np.dtype(dtype).str)
        if key not in self._pos_cache:
            self._pos_cache[key] = np.concatenate(
                [sine_position_embedding(h, w, self.d_model, dtype) for h, w in shapes], axis=0)
        return self._pos_cache[key]

    def forward(self, levels):
        levels = [T.as_tensor(lv) for lv in levels]
        B = levels[0].shape[0]
        shapes = [(lv.shape[2], lv.shape[3]) for lv in levels]
        sizes = [h * w for h, w in shapes]
        flat = [T.reshape(T.transpose(lv, (0, 2, 3, 1)), (B, n, self.d_model)) for lv, n in zip(levels, sizes)]
        src = flat[0] if len(flat) == 1 else T.concat(flat, axis=1)
        level_ids = np.repeat(np.arange(len(shapes)), sizes)
        pos = T.Tensor(self._position(shapes, src.dtype)) + T.index(self.level_embed, level_ids)
        ref = pixel_reference_points(shapes).astype(src.dtype)
        value = self.attn.project_values(levels)
        x = self.norm1(src + self.attn(src + pos, ref, levels, value=value))
        x = self.norm2(x + self.ffn(x))
        out, start = [], 0
        for (h, w), n in zip(shapes, sizes):
            part = T.index(x, (slice(None), slice(start, start + n)))
            out.append(T.transpose(T.reshape(part, (B, h, w, self.d_model)), (0, 3, 1, 2)))
            start += n
        return out


def encoder_layer(params, features):
    """Apply one :class:`EncoderLayer` to a pyramid; shapes are preserved."""
    return params(features)
