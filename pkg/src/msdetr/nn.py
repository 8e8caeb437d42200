"""Parameter containers and the small set of layers the detector is built from."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(np.array(data, dtype=dtype or T.DEFAULT_DTYPE), requires_grad=True)


class Module:
    """Base class: tracks sub-modules, parameters and buffers by attribute."""

    def __init__(self):
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        for registry in (self._modules, self._params, self._buffers):
            registry.pop(name, None)
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = None
        object.__setattr__(self, name, array)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    # -- traversal --------------------------------------------------------------
    def named_modules(self, prefix=""):
        yield prefix, self
        for name, mod in self._modules.items():
            yield from mod.named_modules(f"{prefix}{name}.")

    def named_parameters(self):
        for prefix, mod in self.named_modules():
            for name, p in mod._params.items():
                yield prefix + name, p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        for prefix, mod in self.named_modules():
            for name in mod._buffers:
                yield prefix + name, getattr(mod, name)

    def state_dict(self):
        state = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state, strict=True):
        own = self.state_dict()
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for prefix, mod in self.named_modules():
            for name, p in mod._params.items():
                if prefix + name in state:
                    src = np.asarray(state[prefix + name])
                    if src.shape != p.data.shape:
                        raise T.DimensionError(f"{prefix + name}: shape {src.shape} != {p.data.shape}")
                    p.data = src.astype(p.data.dtype, copy=True)
            for name in mod._buffers:
                if prefix + name in state:
                    cur = getattr(mod, name)
                    object.__setattr__(mod, name, np.asarray(state[prefix + name]).astype(cur.dtype, copy=True))
        return self

    def num_parameters(self):
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode=True):
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        """Cast every parameter and floating buffer in place."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for prefix, mod in self.named_modules():
            for name in mod._buffers:
                buf = getattr(mod, name)
                if buf.dtype.kind == "f":
                    object.__setattr__(mod, name, buf.astype(dtype))
        return self


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module):
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __setitem__(self, i, module):
        setattr(self, str(i), module)
        self._items[i] = module

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


class Identity(Module):
    def forward(self, x):
        return x


def xavier_uniform(rng, fan_in, fan_out, shape):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """Affine map over the last axis: ``x @ W.T + b`` with W of shape (out, in)."""

    def __init__(self, in_features, out_features, rng=None, bias=True):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(xavier_uniform(rng, in_features, out_features, (out_features, in_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x):
        y = T.matmul(x, T.transpose(self.weight, (1, 0)))
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def forward(self, x):
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x):
        return T.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)

    def params(self):
        """Frozen snapshot of the running statistics for folding."""
        return T.BnParams(self.weight.data, self.bias.data, self.running_mean,
                          self.running_var, self.eps)

    def set_params(self, bn):
        self.weight.data = np.array(bn.gamma, dtype=self.weight.dtype)
        self.bias.data = np.array(bn.beta, dtype=self.bias.dtype)
        object.__setattr__(self, "running_mean", np.array(bn.mu, dtype=self.running_mean.dtype))
        object.__setattr__(self, "running_var", np.array(bn.sigma2, dtype=self.running_var.dtype))
        self.eps = bn.eps


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, k, stride=1, padding=None, groups=1, bias=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.groups = groups
        fan_in = in_ch // groups * k * k
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch // groups, k, k)))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


_ACTS = {"silu": T.silu, "relu": T.relu, None: None}


class ConvBNAct(Module):
    """Convolution without bias, then batch norm, then an optional activation."""

    def __init__(self, in_ch, out_ch, k=3, stride=1, act="silu", rng=None):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, k, stride, bias=False, rng=rng)
        self.bn = BatchNorm2d(out_ch)
        self.act = act

    def forward(self, x):
        y = self.bn(self.conv(x))
        fn = _ACTS[self.act]
        return fn(y) if fn is not None else y


def sine_position_embedding(h, w, dim, dtype=T.DEFAULT_DTYPE, temperature=10000.0):
    """Fixed 2-D sinusoidal embedding of normalised pixel centres, shape (h*w, dim)."""
    if dim % 4:
        raise T.DimensionError("position embedding width must be divisible by 4")
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    n = dim // 4
    freq = temperature ** (-np.arange(n) / n) * 2.0 * np.pi
    px = xx.reshape(-1, 1) * freq
    py = yy.reshape(-1, 1) * freq
    emb = np.concatenate([np.sin(px), np.cos(px), np.sin(py), np.cos(py)], axis=1)
    return emb.astype(dtype)
