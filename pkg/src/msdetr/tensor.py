"""Dense tensors with tape-based reverse-mode differentiation.

Every operation works on whole numpy arrays.  When gradient recording is
enabled and any input requires a gradient, the result remembers its parents
and a closure mapping the output gradient to input gradients.  Nodes carry a
monotonically increasing tape index, so replaying the tape backwards is a sort
by that index.
"""

from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np

from . import _kernels

DEFAULT_DTYPE = np.float64

_tape_counter = itertools.count()
_state = threading.local()


class DimensionError(ValueError):
    """Raised when array shapes violate an operation's contract."""


class DomainError(ValueError):
    """Raised when values fall outside an operation's domain."""


class EvaluationError(ArithmeticError):
    """Raised when an evaluation produces non-finite values."""


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class FlopCounter:
    """Accumulates analytic floating-point operation counts while active."""

    def __init__(self):
        self.total = 0


def _count(n):
    counter = getattr(_state, "flops", None)
    if counter is not None:
        counter.total += int(n)


@contextlib.contextmanager
def count_flops():
    """Count the FLOPs of every arithmetic op evaluated inside the block."""
    prev = getattr(_state, "flops", None)
    counter = FlopCounter()
    _state.flops = counter
    try:
        yield counter
    finally:
        _state.flops = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_tape")
    # make numpy defer to the reflected Tensor operators (``ndarray + Tensor``)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind in "biu" or arr.dtype == np.float16:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._tape = next(_tape_counter)

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # -- differentiation -------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in nodes:
                continue
            nodes[id(node)] = node
            stack.extend(p for p in node._parents if p.requires_grad)
        order = sorted(nodes.values(), key=lambda n: n._tape, reverse=True)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def zero_grad(self):
        self.grad = None

    # -- operator sugar --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        if isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64):
            return Tensor(x)
        dtype = DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward, flops=0):
    if flops:
        _count(flops)
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b):
    if isinstance(a, Tensor):
        b = as_tensor(b, a.dtype)
    elif isinstance(b, Tensor):
        a = as_tensor(a, b.dtype)
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


# -- elementwise arithmetic ------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    out = a.data + b.data
    return _result(out, (a, b), backward, out.size)


def sub(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    out = a.data - b.data
    return _result(out, (a, b), backward, out.size)


def mul(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    out = a.data * b.data
    return _result(out, (a, b), backward, out.size)


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return _result(out, (a, b), backward, out.size)


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    out = a.data ** p

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _result(out, (a,), backward)


def exp(a):
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def abs_(a):
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sigmoid(a):
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), 4 * out.size)


def _sigmoid(x):
    return _kernels.sigmoid(x)


def silu(a):
    out, deriv = _kernels.silu_with_grad(np.ascontiguousarray(a.data))
    return _result(out, (a,), lambda g: (g * deriv,), 5 * out.size)


def relu(a):
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def maximum(a, b):
    a, b = _pair(a, b)
    take_a = a.data >= b.data

    def backward(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _result(np.where(take_a, a.data, b.data), (a, b), backward)


def minimum(a, b):
    a, b = _pair(a, b)
    take_a = a.data <= b.data

    def backward(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _result(np.where(take_a, a.data, b.data), (a, b), backward)


def clip(a, lo=None, hi=None):
    out = np.clip(a.data, lo, hi)
    mask = out == a.data
    return _result(out, (a,), lambda g: (g * mask,))


# -- reductions and shape manipulation -------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def index(a, idx):
    a = as_tensor(a)
    out = a.data[idx]
    fancy = _is_fancy(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _result(out, (a,), backward)


def _is_fancy(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray, Tensor)) for i in items)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def matmul(a, b):
    a, b = _pair(a, b)
    flat = b.ndim == 2 and a.ndim > 2
    if flat:
        # one large GEMM instead of a stack of small ones
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))
    else:
        out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a2.T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(out, (a, b), backward, 2 * out.size * a.shape[-1])


# -- normalisation -----------------------------------------------------------------

def softmax(a, axis=-1):
    """Numerically stable softmax; invariant to adding a constant along ``axis``."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward, 4 * out.size)


def layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        n = x.shape[-1]
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        return (gx,
                _unbroadcast(g * xhat, gamma.shape),
                _unbroadcast(g, beta.shape))

    return _result(out, (x, gamma, beta), backward, 7 * out.size)


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel normalisation of a BCHW tensor.

    In training mode the batch statistics normalise and the running arrays are
    updated in place; otherwise the running statistics are used.
    """
    shape = (1, -1, 1, 1)
    if training:
        axes = (0, 2, 3)
        n = x.data.size // x.shape[1]
        mu = x.data.mean(axis=axes)
        xc = x.data - mu.reshape(shape)
        var = (xc * xc).mean(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv.reshape(shape)
        out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

        def backward(g):
            gx = None
            if x.requires_grad:
                gh = g * gamma.data.reshape(shape)
                gx = inv.reshape(shape) * (
                    gh - gh.mean(axis=axes, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=axes, keepdims=True))
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return _result(out, (x, gamma, beta), backward, 6 * out.size)

    scale = gamma.data / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean.reshape(shape)) / np.sqrt(running_var + eps).reshape(shape)
    out = x.data * scale.reshape(shape) + (beta.data - running_mean * scale).reshape(shape)

    def backward(g):
        return (g * scale.reshape(shape) if x.requires_grad else None,
                (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)))

    return _result(out, (x, gamma, beta), backward, 2 * out.size)


def fold_bn(kernel, bias, bn):
    """Absorb an eval-mode batch norm into the preceding convolution.

    Returns ``(kernel', bias')`` as plain arrays such that
    ``conv(x, kernel') + bias'`` equals ``bn(conv(x, kernel) + bias)``.
    """
    kernel = np.asarray(kernel.data if isinstance(kernel, Tensor) else kernel)
    out_ch = kernel.shape[0]
    bias = np.zeros(out_ch, kernel.dtype) if bias is None else np.asarray(
        bias.data if isinstance(bias, Tensor) else bias)
    if bn.channels != out_ch:
        raise DimensionError(f"bn has {bn.channels} channels, kernel out-channels is {out_ch}")
    denom = bn.sigma2 + bn.eps
    if np.any(denom <= 0):
        raise DomainError("sigma2 + eps must be positive for every channel")
    scale = bn.gamma / np.sqrt(denom)
    new_kernel = kernel * scale.reshape((-1,) + (1,) * (kernel.ndim - 1))
    new_bias = bn.beta - bn.gamma * bn.mu / np.sqrt(denom) + scale * bias
    return new_kernel, new_bias


class BnParams:
    """Frozen batch-norm parameters (gamma, beta, running mean and variance)."""

    __slots__ = ("gamma", "beta", "mu", "sigma2", "eps")

    def __init__(self, gamma, beta, mu, sigma2, eps=1e-5):
        self.gamma = np.asarray(gamma, dtype=DEFAULT_DTYPE)
        self.beta = np.asarray(beta, dtype=DEFAULT_DTYPE)
        self.mu = np.asarray(mu, dtype=DEFAULT_DTYPE)
        self.sigma2 = np.asarray(sigma2, dtype=DEFAULT_DTYPE)
        self.eps = float(eps)
        n = self.gamma.shape[0]
        if not (self.beta.shape == self.mu.shape == self.sigma2.shape == (n,)):
            raise DimensionError("gamma, beta, mu and sigma2 must share one channel count")

    @property
    def channels(self):
        return self.gamma.shape[0]

    @classmethod
    def identity(cls, channels, eps=1e-5):
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels),
                   np.full(channels, 1.0 - eps), eps)

    def apply(self, x):
        """Eval-mode normalisation of a BCHW tensor."""
        return batch_norm(as_tensor(x), Tensor(self.gamma), Tensor(self.beta),
                          self.mu.copy(), self.sigma2.copy(), training=False, eps=self.eps)


# -- convolution, pooling, resampling ---------------------------------------------

def conv2d(x, kernel, bias=None, stride=1, padding=0, groups=1):
    """Cross-correlation of a BCHW input with an (out, in/groups, kh, kw) kernel.

    Only ``groups == 1`` and depth-wise (``groups == in_channels``) are supported.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel, x.dtype)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    B, C, H, W = x.shape
    O, I, kh, kw = kernel.shape
    if groups == 1:
        if I != C:
            raise DimensionError(f"input channels (axis 1) = {C} but kernel in-channels (axis 1) = {I}")
    elif groups == C:
        if I != 1 or O != C:
            raise DimensionError(f"depth-wise kernel must be ({C}, 1, kh, kw), got {kernel.shape}")
    else:
        raise DimensionError("groups must be 1 or equal to the input channel count")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {H}x{W} (axes 2, 3)")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    w = kernel.data

    def tap(i, j):
        return xp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride]

    if groups == 1:
        if kh == 1 and kw == 1:
            cols = tap(0, 0)
            out = np.tensordot(w[:, :, 0, 0], cols, axes=([1], [1])).transpose(1, 0, 2, 3)
        else:
            cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
            cols = cols[:, :, ::stride, ::stride]
            out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    else:
        out = np.zeros((B, C, Ho, Wo), dtype=np.result_type(xp, w))
        for i in range(kh):
            for j in range(kw):
                out += tap(i, j) * w[:, 0, i, j].reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias, x.dtype)
        out += bias.data.reshape(1, -1, 1, 1)
        parents.append(bias)

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            if groups == 1 and kh == 1 and kw == 1:
                gxp[:, :, :stride * (Ho - 1) + 1:stride, :stride * (Wo - 1) + 1:stride] += \
                    np.tensordot(w[:, :, 0, 0], g, axes=([0], [1])).transpose(1, 0, 2, 3)
            elif groups == 1:
                gcols = np.tensordot(g, w, axes=([1], [0]))  # B, Ho, Wo, C, kh, kw
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * (Ho - 1) + 1:stride,
                            j:j + stride * (Wo - 1) + 1:stride] += gcols[..., i, j].transpose(0, 3, 1, 2)
            else:
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * (Ho - 1) + 1:stride,
                            j:j + stride * (Wo - 1) + 1:stride] += g * w[:, 0, i, j].reshape(1, -1, 1, 1)
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        if kernel.requires_grad:
            if groups == 1 and kh == 1 and kw == 1:
                gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
            elif groups == 1:
                gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            else:
                gw = np.empty_like(w)
                for i in range(kh):
                    for j in range(kw):
                        gw[:, 0, i, j] = (g * tap(i, j)).sum(axis=(0, 2, 3))
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    macs = out.size * (I * kh * kw)
    return _result(out, parents, backward, 2 * macs + (out.size if bias is not None else 0))


def global_avg_pool(x):
    """Spatial mean of a BCHW tensor, returned as (B, C)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"expected a 4-D tensor, got shape {x.shape}")
    if x.shape[2] * x.shape[3] < 1:
        raise DimensionError("global_avg_pool needs a non-empty spatial extent (axes 2, 3)")
    return mean(x, axis=(2, 3))


def channel_shuffle(x, groups):
    """Reshape channels to (groups, C/groups), transpose and flatten."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    if groups < 1 or C % groups:
        raise DimensionError(f"channel count {C} (axis 1) not divisible by groups={groups}")
    y = reshape(x, (B, groups, C // groups, H, W))
    y = transpose(y, (0, 2, 1, 3, 4))
    return reshape(y, (B, C, H, W))


def shuffle_permutation(channels, groups):
    """Source channel for each output channel of ``channel_shuffle``."""
    return np.arange(channels).reshape(groups, channels // groups).T.reshape(-1)


def _resize_matrix(n_in, n_out, dtype):
    # align-corners-false source coordinate, edge-clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    R = np.zeros((n_out, n_in), dtype=dtype)
    R[np.arange(n_out), i0] += 1.0 - frac
    R[np.arange(n_out), i1] += frac
    return R


def upsample2x(x):
    """Bilinear upsampling by a factor of two (align-corners-false)."""
    x = as_tensor(x)
    H, W = x.shape[2], x.shape[3]
    Ry = Tensor(_resize_matrix(H, 2 * H, x.dtype))
    RxT = Tensor(_resize_matrix(W, 2 * W, x.dtype).T.copy())
    return matmul(Ry, matmul(x, RxT))


# -- deformable sampling --------------------------------------------------------------

def ms_deform_sample(value, shapes, loc, attn):
    """Attention-weighted bilinear sampling across several feature levels.

    value : (B, P, M, Dv) with the P axis holding every level's pixels
            flattened row-major, levels in order.
    shapes: sequence of (H_l, W_l).
    loc   : (B, Q, M, L, K, 2) normalised (x, y) sampling locations.
    attn  : (B, Q, M, L, K) weights.

    Returns (B, Q, M, Dv).  Locations map to pixel coordinates as
    ``x * W_l - 0.5``; corners outside a level contribute zero.
    """
    shapes_arr = np.asarray(shapes, dtype=np.int64).reshape(-1, 2)
    starts = np.concatenate([[0], np.cumsum(shapes_arr[:, 0] * shapes_arr[:, 1])[:-1]]).astype(np.int64)
    if value.shape[1] != int((shapes_arr[:, 0] * shapes_arr[:, 1]).sum()):
        raise DimensionError(f"value axis 1 has {value.shape[1]} entries, level shapes need "
                             f"{int((shapes_arr[:, 0] * shapes_arr[:, 1]).sum())}")
    if loc.shape[3] != len(shapes_arr) or attn.shape[3] != len(shapes_arr):
        raise DimensionError(f"loc/attn level axis (3) must equal the {len(shapes_arr)} levels")
    dtype = value.dtype
    v = np.ascontiguousarray(value.data)
    lc = np.ascontiguousarray(loc.data, dtype=dtype)
    aw = np.ascontiguousarray(attn.data, dtype=dtype)
    out, reads = _kernels.deform_forward(v, shapes_arr, starts, lc, aw)
    _kernels.READ_COUNTER.add(reads)

    def backward(g):
        gv, gl, ga = _kernels.deform_backward(v, shapes_arr, starts, lc, aw,
                                              np.ascontiguousarray(g, dtype=dtype))
        return gv, gl, ga

    flops = loc.data.size // 2 * (4 * 2 * v.shape[3] + 12)
    return _result(out, (value, loc, attn), backward, flops)


def bilinear_sample(feature, point):
    """Bilinear value of a (1, C, H, W) map at a normalised (x, y) point.

    Out-of-map corners read as zero.  Differentiable in both arguments.
    """
    feature = as_tensor(feature)
    if feature.ndim != 4 or feature.shape[0] != 1:
        raise DimensionError(f"feature must be (1, C, H, W), got {feature.shape}")
    _, C, H, W = feature.shape
    point = as_tensor(point, feature.dtype)
    value = reshape(transpose(feature, (0, 2, 3, 1)), (1, H * W, 1, C))
    loc = reshape(point, (1, 1, 1, 1, 1, 2))
    attn = Tensor(np.ones((1, 1, 1, 1, 1), dtype=feature.dtype))
    out = ms_deform_sample(value, [(H, W)], loc, attn)
    return reshape(out, (C,))


# -- verification --------------------------------------------------------------------

def grad_check(op, x, h=1e-5):
    """Max relative error between the tape gradient and central differences.

    ``op`` maps a Tensor to a scalar Tensor.  The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64, order="C")
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = op(leaf)
    if not np.all(np.isfinite(out.data)):
        raise EvaluationError("op produced a non-finite value")
    if out.requires_grad:
        out.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)
    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(op(Tensor(x0.copy())).data)
            flat[i] = orig - h
            fm = float(op(Tensor(x0.copy())).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise EvaluationError("op produced a non-finite value during differencing")
            num_flat[i] = (fp - fm) / (2.0 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
