"""Backbone, encoder, fusion neck and decoder composed into one detector."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .decoder import Decoder
from .deform_attn import EncoderLayer
from .fusion import FusionNeck
from .nn import BatchNorm2d, ConvBNAct, Module, ModuleList
from .reparam import RepBlock, fuse


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class StateError(RuntimeError):
    """Model state is not usable for the requested operation."""


@dataclass
class ModelConfig:
    num_levels: int = 3
    d_model: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    n_heads: int = 4
    n_points: int = 4
    n_queries: int = 30
    n_classes: int = 5
    rep: bool = True
    da: bool = True
    csff: bool = True
    backbone_widths: tuple = (32, 64, 64, 64)
    backbone_blocks: tuple = (1, 2, 2)
    rep_1x1: bool = True
    rep_identity: bool = True
    ffn_dim: int = 0
    ca_reduction: int = 16
    vov_blocks: int = 2
    aux_loss: bool = False
    box_relative: bool = False
    image_size: int = 128

    def __post_init__(self):
        self.backbone_widths = tuple(int(w) for w in self.backbone_widths)
        self.backbone_blocks = tuple(int(b) for b in self.backbone_blocks)

    def validate(self):
        for name in ("num_levels", "d_model", "enc_layers", "dec_layers", "n_heads", "n_points",
                     "n_queries", "n_classes", "ca_reduction", "vov_blocks", "image_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}")
        if self.d_model % 4:
            raise ConfigError(f"d_model={self.d_model} must be divisible by 4 (position embedding, GSConv halves)")
        if len(self.backbone_widths) != self.num_levels + 1:
            raise ConfigError(f"backbone_widths needs num_levels + 1 = {self.num_levels + 1} entries, "
                              f"got {len(self.backbone_widths)}")
        if len(self.backbone_blocks) != self.num_levels:
            raise ConfigError(f"backbone_blocks needs num_levels = {self.num_levels} entries, "
                              f"got {len(self.backbone_blocks)}")
        if any(w < 1 for w in self.backbone_widths):
            raise ConfigError("backbone_widths entries must be >= 1")
        if any(b < 1 for b in self.backbone_blocks):
            raise ConfigError("backbone_blocks entries must be >= 1")
        if self.ffn_dim < 0:
            raise ConfigError("ffn_dim must be >= 0 (0 means 4 * d_model)")
        if self.image_size % 2 ** (self.num_levels + 1):
            raise ConfigError(f"image_size={self.image_size} must be divisible by 2**(num_levels+1)")
        return self

    def to_dict(self):
        d = asdict(self)
        d["backbone_widths"] = list(self.backbone_widths)
        d["backbone_blocks"] = list(self.backbone_blocks)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        return cls(**d)

    @classmethod
    def full_size(cls, **overrides):
        """Full-size configuration: d=256, 8 heads, 4 points, 4 levels, 300 queries, 6+6 layers."""
        base = dict(num_levels=4, d_model=256, enc_layers=6, dec_layers=6, n_heads=8, n_points=4,
                    n_queries=300, backbone_widths=(64, 256, 512, 1024, 2048),
                    backbone_blocks=(1, 1, 1, 1), image_size=640)
        base.update(overrides)
        return cls(**base)


def level_shapes(cfg, h=None, w=None):
    h = h or cfg.image_size
    w = w or cfg.image_size
    return [(h // 2 ** (l + 2), w // 2 ** (l + 2)) for l in range(cfg.num_levels)]


def _block(cfg, in_ch, out_ch, stride, rng):
    if cfg.rep:
        return RepBlock(in_ch, out_ch, stride, cfg.rep_1x1, cfg.rep_identity, rng)
    return ConvBNAct(in_ch, out_ch, 3, stride, rng=rng)


class Backbone(Module):
    """Stride-2 stem, then one stage per level, each opening with a stride-2 block."""

    def __init__(self, cfg, rng):
        super().__init__()
        widths, blocks = cfg.backbone_widths, cfg.backbone_blocks
        self.stem = _block(cfg, 3, widths[0], 2, rng)
        self.stages = ModuleList()
        for l in range(cfg.num_levels):
            stage = ModuleList([_block(cfg, widths[l], widths[l + 1], 2, rng)])
            for _ in range(blocks[l] - 1):
                stage.append(_block(cfg, widths[l + 1], widths[l + 1], 1, rng))
            self.stages.append(stage)

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            for blk in stage:
                x = blk(x)
            feats.append(x)
        return feats


class ConvRefine(Module):
    """Residual 3x3 conv per level; stands in for attention when DA is off."""

    def __init__(self, d, n_levels, rng):
        super().__init__()
        self.convs = ModuleList(ConvBNAct(d, d, 3, rng=rng) for _ in range(n_levels))

    def forward(self, levels):
        return [lv + conv(lv) for lv, conv in zip(levels, self.convs)]


class Model(Module):
    def __init__(self, cfg: ModelConfig, seed=0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, L = cfg.d_model, cfg.num_levels
        shapes = level_shapes(cfg)
        ffn = cfg.ffn_dim or 4 * d
        self.backbone = Backbone(cfg, rng)
        self.input_proj = ModuleList(ConvBNAct(cfg.backbone_widths[l + 1], d, 1, act=None, rng=rng)
                                     for l in range(L))
        if cfg.da:
            self.encoder = ModuleList(EncoderLayer(d, cfg.n_heads, L, cfg.n_points, ffn, shapes, rng)
                                      for _ in range(cfg.enc_layers))
        else:
            self.encoder = ModuleList(ConvRefine(d, L, rng) for _ in range(cfg.enc_layers))
        if cfg.csff:
            self.neck = FusionNeck(d, L, True, True, True, cfg.vov_blocks, cfg.ca_reduction, rng)
        else:
            self.neck = FusionNeck(d, L, False, False, False, rng=rng)
        self.decoder = Decoder(d, cfg.n_heads, L, cfg.n_points, cfg.n_queries, cfg.dec_layers,
                               cfg.n_classes, ffn, cfg.box_relative, shapes, rng)

    def features(self, images):
        images = T.as_tensor(images, self.dtype)
        if images.ndim != 4 or images.shape[1] != 3:
            raise T.DimensionError(f"images must be (B, 3, H, W), got {images.shape}")
        div = 2 ** (self.cfg.num_levels + 1)
        if images.shape[2] % div or images.shape[3] % div:
            raise T.DimensionError(f"image height and width must be divisible by {div}, "
                                   f"got {images.shape[2]}x{images.shape[3]}")
        feats = [proj(f) for proj, f in zip(self.input_proj, self.backbone(images))]
        for layer in self.encoder:
            feats = layer(feats)
        return self.neck(feats)

    def forward(self, images, return_all=False):
        return self.decoder(self.features(images), return_all=return_all)

    @property
    def dtype(self):
        return self.decoder.query_embed.dtype

    def rep_blocks(self):
        return [name for name, m in self.named_modules() if isinstance(m, RepBlock)]


def build(cfg: ModelConfig, seed=0):
    """Instantiate a freshly initialised :class:`Model`."""
    return Model(cfg, seed)


def forward(model, images):
    return model(images)


def _replace(parent, name, module):
    if isinstance(parent, ModuleList):
        parent[int(name)] = module
    else:
        setattr(parent, name, module)


def fuse_model(model):
    """Copy of ``model`` with every :class:`RepBlock` collapsed to a :class:`FusedBlock`.

    The copy is put in eval mode; fusion uses batch-norm running statistics.
    """
    for name, mod in model.named_modules():
        if isinstance(mod, BatchNorm2d):
            if not (np.all(np.isfinite(mod.running_mean)) and np.all(np.isfinite(mod.running_var))
                    and np.all(mod.running_var + mod.eps > 0)):
                raise StateError(f"batch-norm statistics of {name or 'model'} are not usable")
    fused = copy.deepcopy(model)
    targets = [(name, mod) for name, mod in fused.named_modules() if isinstance(mod, RepBlock)]
    lookup = dict(fused.named_modules())
    for name, block in targets:
        path = name.rstrip(".")
        parent_name, _, attr = path.rpartition(".")
        parent = lookup[parent_name + "." if parent_name else ""]
        _replace(parent, attr, fuse(block).astype(model.dtype))
    return fused.eval()


def model_flops(model, height=None, width=None, batch=1):
    """Analytic FLOPs of one eval-mode forward pass."""
    h = height or model.cfg.image_size
    w = width or model.cfg.image_size
    was_training = model.training
    model.eval()
    try:
        with T.no_grad(), T.count_flops() as fc:
            model(np.zeros((batch, 3, h, w), dtype=model.dtype))
    finally:
        model.train(was_training)
    return fc.total


def postprocess(detections, top_k=None):
    """Per image: top-k (query, class) pairs ranked by foreground probability.

    Returns a list of dicts with ``boxes`` (cx, cy, w, h), ``scores`` and ``labels``.
    """
    logits, boxes = detections.numpy()
    z = logits - logits.max(axis=-1, keepdims=True)
    prob = np.exp(z)
    prob /= prob.sum(axis=-1, keepdims=True)
    fg = prob[..., :-1]
    B, Nq, C = fg.shape
    k = min(top_k or Nq, Nq * C)
    out = []
    for b in range(B):
        flat = fg[b].reshape(-1)
        order = np.argsort(-flat, kind="stable")[:k]
        out.append({"boxes": boxes[b][order // C].astype(np.float64),
                    "scores": flat[order].astype(np.float64),
                    "labels": (order % C).astype(np.int64)})
    return out
