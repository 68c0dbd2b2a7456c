"""Neural-net layers on top of the autodiff tape.

All layers accept either a single sequence [T, d] or a padded batch
[B, T, d]; boolean masks mark valid positions (True = real frame).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Parameter(Tensor):
    """Trainable tensor; unique name paths are stamped by named_parameters()."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
            self._children.pop(key, None)
        elif isinstance(value, Module):
            self._children[key] = value
            self._params.pop(key, None)
        object.__setattr__(self, key, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix=""):
        for k, p in self._params.items():
            p.name = prefix + k
            yield p.name, p
        for k, m in self._children.items():
            yield from m.named_parameters(f"{prefix}{k}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for m in self._children.values():
            yield from m.modules()

    def train(self, flag=True):
        for m in self.modules():
            object.__setattr__(m, "training", flag)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ValueError(f"parameter names mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: file {arr.shape} vs model {p.data.shape}")
            p.data = arr.astype(p.data.dtype)


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._list = []
        for m in mods:
            self.append(m)

    def append(self, m):
        setattr(self, str(len(self._list)), m)
        self._list.append(m)

    def __iter__(self):
        return iter(self._list)

    def __len__(self):
        return len(self._list)

    def __getitem__(self, i):
        return self._list[i]


def _uniform_init(rng, fan_in, shape):
    bound = float(np.sqrt(1.0 / fan_in))
    return ((rng.random(shape) * 2.0 - 1.0) * bound).astype(ad.default_dtype())


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        super().__init__()
        self.weight = Parameter(_uniform_init(rng, d_in, (d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out, dtype=ad.default_dtype())) if bias else None

    def forward(self, x):
        y = ad.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then apply gain and bias."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    gain_dim = gain.shape[-1] if isinstance(gain, Tensor) else np.shape(gain)[-1]
    if x.shape[-1] != gain_dim:
        raise ValueError(f"layer_norm dim mismatch: x has {x.shape[-1]}, gain has {gain_dim}")
    mu = ad.reduce_mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = ad.reduce_mean(ad.mul(xc, xc), axis=-1, keepdims=True)
    inv = (var + eps) ** -0.5
    return ad.mul(xc, inv) * gain + bias


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.gain = Parameter(np.ones(dim, dtype=ad.default_dtype()))
        self.bias = Parameter(np.zeros(dim, dtype=ad.default_dtype()))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias, self.eps)


def conv1d_same(x, kernel, bias=None):
    """Width-3 1D convolution over the time axis with zero padding of one
    frame each side, so the output time length equals the input's.

    x: [..., T, Cin], kernel: [3, Cin, Cout].
    """
    kw = kernel.shape[0]
    if kw != 3:
        raise ValueError(f"conv1d_same expects kernel width 3, got {kw}")
    cin = kernel.shape[1]
    if x.shape[-1] != cin:
        raise ValueError(f"conv1d_same channel mismatch: x has {x.shape[-1]}, kernel expects {cin}")
    t = x.shape[-2]
    xp = ad.pad_time(x, 1, 1)
    taps = [xp[(Ellipsis, slice(off, off + t), slice(None))] for off in range(3)]
    windows = ad.concat(taps, axis=-1)
    w = ad.reshape(kernel, (3 * cin, kernel.shape[2]))
    y = ad.matmul(windows, w)
    if bias is not None:
        y = y + bias
    return y


class Conv1dSame(Module):
    def __init__(self, c_in, c_out, rng, bias=True):
        super().__init__()
        self.kernel = Parameter(_uniform_init(rng, 3 * c_in, (3, c_in, c_out)))
        self.bias = Parameter(np.zeros(c_out, dtype=ad.default_dtype())) if bias else None

    def forward(self, x):
        return conv1d_same(x, self.kernel, self.bias)


class Embedding(Module):
    def __init__(self, num_embeddings, dim, rng):
        super().__init__()
        self.num_embeddings = num_embeddings
        table = rng.normal(0.0, 0.02, (num_embeddings, dim)).astype(ad.default_dtype())
        self.table = Parameter(table)

    def forward(self, ids):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.num_embeddings):
            raise ValueError(f"embedding id out of range [0, {self.num_embeddings})")
        return self.table[ids]


class Dropout(Module):
    def __init__(self, p, rng):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng

    def forward(self, x):
        return ad.dropout(x, self.p, self.rng, self.training)


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention over the time axis.

    An optional boolean mask marks valid key positions; masked keys get an
    additive -1e9 before the softmax and contribute exactly zero weight.
    """

    def __init__(self, dim, heads, rng):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"hidden dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        # Projection biases are either useless (a key bias shifts every score
        # in a row equally, which softmax ignores) or redundant with wo's.
        self.wq = Linear(dim, dim, rng, bias=False)
        self.wk = Linear(dim, dim, rng, bias=False)
        self.wv = Linear(dim, dim, rng, bias=False)
        self.wo = Linear(dim, dim, rng)

    def _split(self, x):
        lead = x.shape[:-2]
        t = x.shape[-2]
        dh = self.dim // self.heads
        x = ad.reshape(x, lead + (t, self.heads, dh))
        nd = x.ndim
        perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        return ad.transpose(x, perm)

    def forward(self, x, mask=None):
        lead = x.shape[:-2]
        t = x.shape[-2]
        dh = self.dim // self.heads
        q, k, v = self._split(self.wq(x)), self._split(self.wk(x)), self._split(self.wv(x))
        nd = k.ndim
        kt = ad.transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
        scores = ad.matmul(q, kt) * (1.0 / float(np.sqrt(dh)))
        if mask is not None:
            valid = np.asarray(mask, dtype=bool)
            if valid.shape[-1] != t:
                raise ValueError(f"attention mask length {valid.shape[-1]} != sequence length {t}")
            if np.any(valid.sum(axis=-1) == 0):
                raise ValueError("attention over a fully masked sequence")
            additive = np.where(valid, 0.0, -1e9).astype(x.dtype)
            additive = np.expand_dims(additive, (-2, -3))
            scores = scores + Tensor(additive)
        attn = ad.softmax(scores, axis=-1)
        out = ad.matmul(attn, v)
        perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        out = ad.transpose(out, perm)
        out = ad.reshape(out, lead + (t, self.dim))
        return self.wo(out)


def sinusoid_positions(t, dim, dtype):
    """Classic fixed sinusoidal position table, shape [t, dim]."""
    pos = np.arange(t)[:, None]
    idx = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, 2 * (idx // 2) / dim)
    table = np.zeros((t, dim))
    table[:, 0::2] = np.sin(angle[:, 0::2])
    table[:, 1::2] = np.cos(angle[:, 1::2])
    return table.astype(dtype)
