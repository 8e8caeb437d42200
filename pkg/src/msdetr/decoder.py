"""Query decoder and prediction heads."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .deform_attn import FeedForward, MSDeformAttn
from .nn import LayerNorm, Linear, Module, ModuleList, Parameter


@dataclass
class QuerySet:
    """Query embeddings (B, N_q, d) with normalised reference points (N_q, 2) or (B, N_q, 2)."""

    embeddings: T.Tensor
    ref_points: T.Tensor


@dataclass
class Detections:
    """Class logits (B, N_q, C+1), background last, and sigmoid (cx, cy, w, h) boxes (B, N_q, 4)."""

    class_logits: T.Tensor
    boxes: T.Tensor

    def numpy(self):
        return self.class_logits.data, self.boxes.data


class SelfAttention(Module):
    """Multi-head scaled dot-product attention among queries, residual + LayerNorm."""

    def __init__(self, d_model, n_heads, rng=None):
        super().__init__()
        if d_model % n_heads:
            raise T.DimensionError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.q_proj = Linear(d_model, d_model, rng)
        self.k_proj = Linear(d_model, d_model, rng)
        self.v_proj = Linear(d_model, d_model, rng)
        self.out_proj = Linear(d_model, d_model, rng)
        self.norm = LayerNorm(d_model)

    def _heads(self, x):
        B, N, _ = x.shape
        return T.transpose(T.reshape(x, (B, N, self.n_heads, self.d_model // self.n_heads)), (0, 2, 1, 3))

    def attention_weights(self, x):
        q, k = self._heads(self.q_proj(x)), self._heads(self.k_proj(x))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.d_model // self.n_heads))
        return T.softmax(scores, axis=-1)

    def forward(self, x):
        B, N, d = x.shape
        a = self.attention_weights(x)
        h = T.matmul(a, self._heads(self.v_proj(x)))
        h = T.reshape(T.transpose(h, (0, 2, 1, 3)), (B, N, d))
        return self.norm(x + self.out_proj(h))


class CrossAttention(Module):
    """Deformable attention from each query, at its reference point, into the pyramid."""

    def __init__(self, d_model, n_heads, n_levels, n_points, init_shapes=None, rng=None):
        super().__init__()
        self.attn = MSDeformAttn(d_model, n_heads, n_levels, n_points, init_shapes, rng)
        self.norm = LayerNorm(d_model)

    def forward(self, x, ref, levels, value=None):
        if x.shape[-1] != self.attn.d_model:
            raise T.DimensionError(f"query width {x.shape[-1]} != pyramid width {self.attn.d_model}")
        return self.norm(x + self.attn(x, ref, levels, value=value))


class DecoderLayer(Module):
    """Self-attention, deformable cross-attention, then a SiLU feed-forward block."""

    def __init__(self, d_model, n_heads, n_levels, n_points, ffn_dim=None, init_shapes=None, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.self_attn = SelfAttention(d_model, n_heads, rng)
        self.cross_attn = CrossAttention(d_model, n_heads, n_levels, n_points, init_shapes, rng)
        self.ffn = FeedForward(d_model, ffn_dim or 4 * d_model, rng)
        self.norm = LayerNorm(d_model)

    def forward(self, x, ref, levels, value=None):
        x = self.self_attn(x)
        x = self.cross_attn(x, ref, levels, value=value)
        return self.norm(x + self.ffn(x))


class PredictionHeads(Module):
    """Linear class head with C+1 outputs and sigmoid box head.

    With ``box_relative`` the box centre logits are offset by the inverse
    sigmoid of the query's reference point, so an all-zero box head places
    every box on its own reference point.
    """

    def __init__(self, d_model, n_classes, box_relative=False, rng=None):
        super().__init__()
        self.n_classes = n_classes
        self.box_relative = box_relative
        self.cls = Linear(d_model, n_classes + 1, rng)
        self.box = Linear(d_model, 4, rng)

    def forward(self, x, ref=None):
        logits = self.cls(x)
        raw = self.box(x)
        if self.box_relative and ref is not None:
            r = np.clip(ref.data, 1e-4, 1 - 1e-4)
            shift = np.zeros(r.shape[:-1] + (4,), dtype=raw.dtype)
            shift[..., :2] = np.log(r / (1 - r))
            raw = raw + T.Tensor(shift)
        return Detections(logits, T.sigmoid(raw))


def grid_reference_points(n, lo=0.1, hi=0.9):
    """``n`` points on a near-square grid spanning [lo, hi]^2, row-major."""
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    xs = np.linspace(lo, hi, cols) if cols > 1 else np.array([(lo + hi) / 2])
    ys = np.linspace(lo, hi, rows) if rows > 1 else np.array([(lo + hi) / 2])
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([xx.reshape(-1), yy.reshape(-1)], axis=1)[:n]


class Decoder(Module):
    """Learnable queries refined by a stack of decoder layers."""

    def __init__(self, d_model, n_heads, n_levels, n_points, n_queries, n_layers, n_classes,
                 ffn_dim=None, box_relative=False, init_shapes=None, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_model = d_model
        self.n_queries = n_queries
        self.query_embed = Parameter(rng.normal(0.0, 0.02, size=(n_queries, d_model)))
        ref = grid_reference_points(n_queries)
        self.ref_logit = Parameter(np.log(ref / (1.0 - ref)))
        self.layers = ModuleList(
            DecoderLayer(d_model, n_heads, n_levels, n_points, ffn_dim, init_shapes, rng)
            for _ in range(n_layers))
        self.heads = PredictionHeads(d_model, n_classes, box_relative, rng)

    def queries(self, batch):
        emb = T.reshape(self.query_embed, (1, self.n_queries, self.d_model))
        emb = emb + T.Tensor(np.zeros((batch, 1, 1), dtype=emb.dtype))
        return QuerySet(emb, T.sigmoid(self.ref_logit))

    def forward(self, levels, return_all=False):
        B = levels[0].shape[0]
        qs = self.queries(B)
        x = qs.embeddings
        outs = []
        for layer in self.layers:
            x = layer(x, qs.ref_points, levels)
            if return_all:
                outs.append(self.heads(x, qs.ref_points))
        if return_all:
            return outs
        return self.heads(x, qs.ref_points)


def self_attention(module, q):
    return QuerySet(module(q.embeddings), q.ref_points)


def cross_attention(module, q, fused):
    return QuerySet(module(q.embeddings, q.ref_points, fused), q.ref_points)


def decoder_layer(module, q, fused):
    return QuerySet(module(q.embeddings, q.ref_points, fused), q.ref_points)


def predict_heads(module, q):
    return module(q.embeddings, q.ref_points)
