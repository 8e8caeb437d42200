"""Re-parameterizable 3x3 / 1x1 / identity convolution blocks.

A :class:`RepBlock` trains three parallel branches, each with its own batch
norm, summed before the SiLU.  :func:`fuse` folds every branch into a single
3x3 kernel plus bias so that :class:`FusedBlock` reproduces the block exactly
in eval mode.
"""

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, Module, Parameter


class RepBlock(Module):
    """Three-branch training block.

    The identity branch only exists when ``in_ch == out_ch`` and ``stride == 1``.
    ``use_1x1`` / ``use_identity`` switch the auxiliary branches off for
    branch ablations.
    """

    def __init__(self, in_ch, out_ch, stride=1, use_1x1=True, use_identity=True, rng=None):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError("RepBlock stride must be 1 or 2")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.stride = stride
        self.conv3 = Conv2d(in_ch, out_ch, 3, stride, padding=1, bias=False, rng=rng)
        self.bn3 = BatchNorm2d(out_ch)
        self.use_1x1 = use_1x1
        if use_1x1:
            self.conv1 = Conv2d(in_ch, out_ch, 1, stride, padding=0, bias=False, rng=rng)
            self.bn1 = BatchNorm2d(out_ch)
        self.has_identity = bool(use_identity and in_ch == out_ch and stride == 1)
        if self.has_identity:
            self.bnid = BatchNorm2d(out_ch)

    def branches(self, x):
        """Per-branch outputs before summation and activation."""
        outs = [self.bn3(self.conv3(x))]
        if self.use_1x1:
            outs.append(self.bn1(self.conv1(x)))
        if self.has_identity:
            outs.append(self.bnid(x))
        return outs

    def forward(self, x):
        x = T.as_tensor(x)
        if x.shape[1] != self.in_ch:
            raise T.DimensionError(f"input has {x.shape[1]} channels (axis 1), block expects {self.in_ch}")
        outs = self.branches(x)
        y = outs[0]
        for o in outs[1:]:
            y = y + o
        return T.silu(y)

    def flops(self, h, w):
        ho = (h - 1) // self.stride + 1
        wo = (w - 1) // self.stride + 1
        n = ho * wo * self.out_ch
        total = 2 * 9 * self.in_ch * n + 2 * n  # 3x3 conv + BN
        if self.use_1x1:
            total += 2 * self.in_ch * n + 2 * n
        if self.has_identity:
            total += 2 * n
        total += (len(self.branches_active()) - 1) * n  # branch sums
        total += 4 * n  # SiLU
        return total, (ho, wo)

    def branches_active(self):
        return ["3x3"] + (["1x1"] if self.use_1x1 else []) + (["id"] if self.has_identity else [])


def rep_forward_train(block, x):
    """Training-time forward pass of a :class:`RepBlock`."""
    return block(x)


class FusedBlock(Module):
    """Single 3x3 convolution with bias followed by SiLU."""

    def __init__(self, weight, bias, stride):
        super().__init__()
        self.weight = Parameter(weight, dtype=np.asarray(weight).dtype)
        self.bias = Parameter(bias, dtype=np.asarray(bias).dtype)
        self.stride = stride

    @property
    def in_ch(self):
        return self.weight.shape[1]

    @property
    def out_ch(self):
        return self.weight.shape[0]

    def forward(self, x):
        return T.silu(T.conv2d(x, self.weight, self.bias, self.stride, 1))

    def flops(self, h, w):
        ho = (h - 1) // self.stride + 1
        wo = (w - 1) // self.stride + 1
        n = ho * wo * self.out_ch
        return 2 * 9 * self.in_ch * n + n + 4 * n, (ho, wo)


def expand_1x1(w1):
    """Zero-pad a (out, in, 1, 1) kernel to (out, in, 3, 3) with the value at the centre."""
    w1 = np.asarray(w1.data if isinstance(w1, T.Tensor) else w1)
    if w1.ndim != 4 or w1.shape[2:] != (1, 1):
        raise T.DimensionError(f"expected a (out, in, 1, 1) kernel, got {w1.shape}")
    out = np.zeros(w1.shape[:2] + (3, 3), dtype=w1.dtype)
    out[:, :, 1, 1] = w1[:, :, 0, 0]
    return out


def identity_kernel(channels, dtype=T.DEFAULT_DTYPE):
    if channels < 1:
        raise ValueError("channels must be >= 1")
    k = np.zeros((channels, channels, 3, 3), dtype=dtype)
    k[np.arange(channels), np.arange(channels), 1, 1] = 1.0
    return k


def fuse(block):
    """Collapse a :class:`RepBlock` into an equivalent :class:`FusedBlock`.

    Uses the running statistics of every branch's batch norm.
    """
    if block.has_identity and (block.in_ch != block.out_ch or block.stride != 1):
        raise ValueError("identity branch requires in == out channels and stride 1")
    w, b = T.fold_bn(block.conv3.weight.data, None, block.bn3.params())
    if block.use_1x1:
        w1, b1 = T.fold_bn(expand_1x1(block.conv1.weight.data), None, block.bn1.params())
        w = w + w1
        b = b + b1
    if block.has_identity:
        wid, bid = T.fold_bn(identity_kernel(block.out_ch, w.dtype), None, block.bnid.params())
        w = w + wid
        b = b + bid
    return FusedBlock(w, b, block.stride)


def block_from_fused(fused):
    """Single-branch :class:`RepBlock` whose batch norm carries the fused bias."""
    rb = RepBlock(fused.in_ch, fused.out_ch, fused.stride, use_1x1=False, use_identity=False)
    rb.conv3.weight.data = fused.weight.data.copy()
    eps = rb.bn3.eps
    rb.bn3.set_params(T.BnParams(np.ones(fused.out_ch), fused.bias.data.copy(),
                                 np.zeros(fused.out_ch), np.full(fused.out_ch, 1.0 - eps), eps))
    return rb
