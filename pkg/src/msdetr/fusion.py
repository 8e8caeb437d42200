"""Bidirectional cross-scale fusion neck.

A pyramid is a list of BCHW tensors, finest first, each level half the size
of the previous one and all of one channel width.
"""

import numpy as np

from . import tensor as T
from .nn import Conv2d, ConvBNAct, Identity, Linear, Module, ModuleList


def check_pyramid(levels):
    if not levels:
        raise T.DimensionError("empty pyramid")
    width = levels[0].shape[1]
    for i, lv in enumerate(levels):
        if lv.ndim != 4:
            raise T.DimensionError(f"level {i} is not 4-D: {lv.shape}")
        if lv.shape[1] != width:
            raise T.DimensionError(f"level {i} has {lv.shape[1]} channels, level 0 has {width}")
        if i and (levels[i - 1].shape[2] != 2 * lv.shape[2] or levels[i - 1].shape[3] != 2 * lv.shape[3]):
            raise T.DimensionError(
                f"levels {i - 1} -> {i} are not dyadic: {levels[i - 1].shape[2:]} vs {lv.shape[2:]}")


class ChannelAttention(Module):
    """Squeeze-and-excitation gate: ``x * sigmoid(fc2(relu(fc1(gap(x)))))``."""

    def __init__(self, channels, reduction=16, rng=None):
        super().__init__()
        r = min(reduction, channels)
        if r < 1 or channels % r:
            raise T.DimensionError(f"channels={channels} not divisible by reduction={r}")
        self.fc1 = Linear(channels, channels // r, rng)
        self.fc2 = Linear(channels // r, channels, rng)

    def gate(self, x):
        s = T.global_avg_pool(x)
        return T.sigmoid(self.fc2(T.relu(self.fc1(s))))

    def forward(self, x):
        g = self.gate(x)
        return x * T.reshape(g, g.shape + (1, 1))


class GSConv(Module):
    """Half-width 1x1 conv, depth-wise 3x3 on that half, concat, 2-group shuffle."""

    def __init__(self, in_ch, out_ch, rng=None):
        super().__init__()
        if out_ch % 2:
            raise T.DimensionError(f"GSConv out_channels must be even, got {out_ch}")
        half = out_ch // 2
        self.conv = ConvBNAct(in_ch, half, 1, rng=rng)
        self.dw = Conv2d(half, half, 3, 1, padding=1, groups=half, bias=True, rng=rng)

    def forward(self, x):
        h = self.conv(x)
        return T.channel_shuffle(T.concat([h, self.dw(h)], axis=1), 2)


class VoVGSCSP(Module):
    """Split channels in half, run one half through ``n_blocks`` GSConvs, re-merge by 1x1."""

    def __init__(self, channels, n_blocks=2, rng=None):
        super().__init__()
        if channels % 2:
            raise T.DimensionError(f"VoVGSCSP needs an even channel count, got {channels}")
        if n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        half = channels // 2
        self.half = half
        self.blocks = ModuleList(GSConv(half, half, rng) for _ in range(n_blocks))
        self.proj = ConvBNAct(channels, channels, 1, rng=rng)

    def forward(self, x):
        x1 = T.index(x, (slice(None), slice(0, self.half)))
        y = T.index(x, (slice(None), slice(self.half, None)))
        for blk in self.blocks:
            y = blk(y)
        return self.proj(T.concat([x1, y], axis=1))


def gsconv(module, x):
    return module(x)


def vovgscsp(module, x):
    return module(x)


def channel_attention(module, x):
    return module(x)


class TopDown(Module):
    """``P_L = Conv1x1(F_L)``; ``P_l = fuse_l(F_l + Upsample(P_{l+1}))`` for finer levels."""

    def __init__(self, channels, n_levels, use_vov=False, use_ca=False, vov_blocks=2,
                 ca_reduction=16, rng=None):
        super().__init__()
        self.top = ConvBNAct(channels, channels, 1, rng=rng)
        self.convs = ModuleList(
            VoVGSCSP(channels, vov_blocks, rng) if use_vov else ConvBNAct(channels, channels, 3, rng=rng)
            for _ in range(n_levels - 1))
        self.gates = ModuleList(
            ChannelAttention(channels, ca_reduction, rng) if use_ca else Identity()
            for _ in range(n_levels - 1))

    def forward(self, levels):
        check_pyramid(levels)
        L = len(levels)
        out = [None] * L
        out[L - 1] = self.top(levels[L - 1])
        for l in range(L - 2, -1, -1):
            fused = self.convs[l](levels[l] + T.upsample2x(out[l + 1]))
            out[l] = self.gates[l](fused)
        return out


class BottomUp(Module):
    """``P_1 = P_1^td``; ``P_l = fuse_l(P_l^td + Down(P_{l-1}))`` with a stride-2 3x3 conv."""

    def __init__(self, channels, n_levels, use_vov=False, use_ca=False, vov_blocks=2,
                 ca_reduction=16, rng=None):
        super().__init__()
        self.downs = ModuleList(ConvBNAct(channels, channels, 3, stride=2, rng=rng)
                                for _ in range(n_levels - 1))
        self.convs = ModuleList(
            VoVGSCSP(channels, vov_blocks, rng) if use_vov else ConvBNAct(channels, channels, 3, rng=rng)
            for _ in range(n_levels - 1))
        self.gates = ModuleList(
            ChannelAttention(channels, ca_reduction, rng) if use_ca else Identity()
            for _ in range(n_levels - 1))

    def forward(self, levels):
        check_pyramid(levels)
        out = [levels[0]]
        for l in range(1, len(levels)):
            fused = self.convs[l - 1](levels[l] + self.downs[l - 1](out[l - 1]))
            out.append(self.gates[l - 1](fused))
        return out


def top_down(module, features):
    return module(features)


def bottom_up(module, features):
    return module(features)


class FusionNeck(Module):
    """Top-down then bottom-up pathway.

    With ``use_vov`` every pathway 3x3 conv is a VoVGSCSP block; with
    ``use_ca`` each fused level passes a channel-attention gate.  Setting
    ``bidirectional=False`` keeps only the top-down pathway.
    """

    def __init__(self, channels, n_levels, use_vov=True, use_ca=True, bidirectional=True,
                 vov_blocks=2, ca_reduction=16, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.td = TopDown(channels, n_levels, use_vov, use_ca, vov_blocks, ca_reduction, rng)
        self.bu = BottomUp(channels, n_levels, use_vov, use_ca, vov_blocks, ca_reduction, rng) \
            if bidirectional else None

    def forward(self, levels):
        out = self.td(levels)
        return self.bu(out) if self.bu is not None else out


def fuse_neck(module, encoded):
    return module(encoded)


def conv3x3_param_count(in_ch, out_ch):
    """Weights of a plain 3x3 conv with batch norm, for efficiency comparisons."""
    return 9 * in_ch * out_ch + 2 * out_ch
