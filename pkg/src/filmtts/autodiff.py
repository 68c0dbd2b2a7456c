"""Minimal reverse-mode automatic differentiation on numpy arrays.

A Tensor wraps an ndarray and remembers how it was produced; calling
``backward()`` on a scalar replays the tape in reverse topological order.
Gradients accumulate additively, so a tensor used in several branches
receives the sum of its branch gradients.

Default precision is float32; gradient checks run under ``use_dtype("float64")``.
"""

from __future__ import annotations

import contextlib

import numpy as np

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True
_TAPE = []        # creation-order record of every grad-requiring op output
_EPOCH = 0        # bumped per backward(); stale tape entries never re-fire


def reset_tape():
    """Drop all recorded ops; call between training steps to bound memory."""
    _TAPE.clear()


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported default dtype {dtype}")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the dtype used for freshly created tensors."""
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (inference / evaluation)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name",
                 "_tape_pos", "_epoch")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        elif data.dtype.kind != "f":
            data = data.astype(_DEFAULT_DTYPE)
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = None
        self._tape_pos = -1
        self._epoch = -1

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

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff ----------------------------------------------------------

    def backward(self):
        """Replay the tape in reverse creation order (a valid topological
        order, and one that does not depend on unrelated graph branches)."""
        global _EPOCH
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        _EPOCH += 1
        self._accum(np.ones_like(self.data))
        if self._tape_pos < 0:
            return
        for i in range(self._tape_pos, -1, -1):
            node = _TAPE[i]
            if node._epoch == _EPOCH and node._backward is not None:
                node._backward(node.grad)

    def _accum(self, g):
        # Accumulation always rebinds (never mutates in place), so holding a
        # reference to the incoming array is safe.
        self._epoch = _EPOCH
        if self.grad is None:
            self.grad = g if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad = self.grad + g

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _lift(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _node(data, parents, backward_fn):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._tape_pos = len(_TAPE)
        _TAPE.append(out)
    return out


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), backward)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), backward)


def div(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(out_data, (a, b), backward)


def neg(a):
    a = _lift(a)

    def backward(g):
        a._accum(-g)

    return _node(-a.data, (a,), backward)


def power(a, p):
    a = _lift(a)
    p = float(p)
    out_data = a.data ** p

    def backward(g):
        a._accum(g * p * a.data ** (p - 1.0))

    return _node(out_data, (a,), backward)


def exp(a):
    a = _lift(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accum(g * out_data)

    return _node(out_data, (a,), backward)


def log(a):
    a = _lift(a)

    def backward(g):
        a._accum(g / a.data)

    return _node(np.log(a.data), (a,), backward)


def relu(a):
    a = _lift(a)
    mask = a.data > 0

    def backward(g):
        a._accum(g * mask)

    return _node(np.where(mask, a.data, 0.0), (a,), backward)


def softplus(a):
    """log(1 + exp(x)), computed stably for large |x|."""
    a = _lift(a)
    out_data = np.logaddexp(0.0, a.data)

    def backward(g):
        x = a.data
        sig = np.empty_like(x)
        pos = x >= 0
        sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        sig[~pos] = ex / (1.0 + ex)
        a._accum(g * sig)

    return _node(out_data, (a,), backward)


def maximum(a, floor):
    """Elementwise max against a constant; gradient passes where a >= floor."""
    a = _lift(a)
    floor = float(floor)
    mask = a.data >= floor

    def backward(g):
        a._accum(g * mask)

    return _node(np.maximum(a.data, floor), (a,), backward)


def grad_reverse(x, scale):
    """Identity forward; backward delivers -scale * grad upstream."""
    x = _lift(x)
    scale = float(scale)
    if scale < 0:
        raise ValueError(f"grad_reverse scale must be nonnegative, got {scale}")

    def backward(g):
        x._accum(-scale * g)

    return _node(x.data.copy(), (x,), backward)


# -- shape ops ---------------------------------------------------------------

def reshape(a, shape):
    a = _lift(a)
    old_shape = a.data.shape

    def backward(g):
        a._accum(g.reshape(old_shape))

    return _node(a.data.reshape(shape), (a,), backward)


def transpose(a, axes):
    a = _lift(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        a._accum(g.transpose(inv))

    return _node(a.data.transpose(axes), (a,), backward)


def _is_basic_index(idx):
    if isinstance(idx, (slice, int)) or idx is Ellipsis:
        return True
    if isinstance(idx, tuple):
        return all(isinstance(e, (slice, int)) or e is Ellipsis for e in idx)
    return False


def take(a, idx):
    """Index with any numpy index expression; backward scatters additively."""
    a = _lift(a)
    in_shape = a.data.shape
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        if basic:
            full[idx] += g          # basic indexing cannot repeat positions
        else:
            np.add.at(full, idx, g)
        a._accum(full)

    return _node(a.data[idx], (a,), backward)


def concat(tensors, axis):
    tensors = [_lift(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accum(piece)

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def pad_time(a, before=1, after=1):
    """Zero-pad along the time axis (second to last)."""
    a = _lift(a)
    widths = [(0, 0)] * a.data.ndim
    widths[-2] = (before, after)
    t = a.data.shape[-2]

    def backward(g):
        sl = [slice(None)] * g.ndim
        sl[-2] = slice(before, before + t)
        a._accum(g[tuple(sl)])

    return _node(np.pad(a.data, widths), (a,), backward)


# -- reductions ---------------------------------------------------------------

def reduce_sum(a, axis=None, keepdims=False):
    a = _lift(a)
    in_shape = a.data.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, in_shape).copy())

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def reduce_mean(a, axis=None, keepdims=False):
    a = _lift(a)
    in_shape = a.data.shape
    if axis is None:
        n = a.data.size
    else:
        n = in_shape[axis] if isinstance(axis, int) else int(np.prod([in_shape[i] for i in axis]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g / n, in_shape).copy())

    return _node(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    a, b = _lift(a), _lift(b)
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            if b.data.ndim == 1:
                ga = np.expand_dims(g, -1) * b.data if a.data.ndim > 1 else g * b.data
            else:
                ga = g @ b.data.swapaxes(-1, -2)
            a._accum(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            if a.data.ndim == 1 and b.data.ndim == 1:
                gb = g * a.data
            elif a.data.ndim == 1:
                gb = np.expand_dims(a.data, -1) * np.expand_dims(g, -2)
            elif b.data.ndim == 1:
                gb = (a.data * np.expand_dims(g, -1)).reshape(-1, a.data.shape[-1]).sum(axis=0)
            else:
                gb = a.data.swapaxes(-1, -2) @ g
            b._accum(_unbroadcast(gb, b.data.shape))

    return _node(out_data, (a, b), backward)


# -- composites ---------------------------------------------------------------

def softmax(x, axis=-1):
    """Numerically stable softmax; the max shift is constant w.r.t. the tape."""
    x = _lift(x)
    shift = x - x.data.max(axis=axis, keepdims=True)
    e = exp(shift)
    return e / reduce_sum(e, axis=axis, keepdims=True)


def dropout(x, p, rng, training):
    """Inverted-scale dropout; identity in eval mode."""
    x = _lift(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.uniform(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return mul(x, Tensor(keep))


def _expand_mask(mask, target_ndim):
    m = np.asarray(mask)
    while m.ndim < target_ndim:
        m = m[..., None]
    return m


def masked_mean(x, mask=None):
    """Mean over all elements, or over elements where mask (broadcast from
    leading axes) is true. Padded entries contribute nothing to value or count."""
    x = _lift(x)
    if mask is None:
        return reduce_mean(x)
    m = _expand_mask(mask, x.data.ndim).astype(x.data.dtype)
    count = float(np.broadcast_to(m, x.data.shape).sum())
    if count == 0:
        raise ValueError("masked_mean over an empty mask")
    return reduce_sum(mul(x, Tensor(m))) / count


def mse(pred, target, mask=None):
    d = _lift(pred) - _lift(target)
    return masked_mean(mul(d, d), mask)


def mae(pred, target, mask=None):
    pred, target = _lift(pred), _lift(target)
    d = pred - target
    sign = np.sign(d.data)

    def backward(g):
        d._accum(g * sign)

    absd = _node(np.abs(d.data), (d,), backward)
    return masked_mean(absd, mask)


def cross_entropy_with_logits(logits, targets, mask=None):
    """Mean cross entropy; `targets` are integer class ids.

    Accepts [S] with scalar target or [B, S] with [B] targets.
    """
    logits = _lift(logits)
    targets = np.asarray(targets)
    n_classes = logits.data.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise ValueError("cross-entropy target out of range")
    shift = logits - logits.data.max(axis=-1, keepdims=True)
    lse = log(reduce_sum(exp(shift), axis=-1))
    if logits.data.ndim == 1:
        picked = shift[int(targets)]
        return lse - picked
    picked = shift[np.arange(logits.data.shape[0]), targets]
    return masked_mean(lse - picked, mask)


def temporal_mean(x, mask=None):
    """Mean over the time axis (second to last): [..., T, d] -> [..., d]."""
    x = _lift(x)
    if mask is None:
        return reduce_mean(x, axis=-2)
    m = np.asarray(mask).astype(x.data.dtype)[..., None]
    counts = m.sum(axis=-2)
    if np.any(counts == 0):
        raise ValueError("temporal_mean over a fully masked sequence")
    return reduce_sum(mul(x, Tensor(m)), axis=-2) / Tensor(counts)


# -- randomness --------------------------------------------------------------

class CounterRNG:
    """Counter-based Philox stream: draw k is a pure function of (seed, k),
    so a fixed seed gives bit-identical sequences across runs."""

    def __init__(self, seed):
        self.seed = int(seed)
        self.counter = 0

    def uniform(self, shape):
        key = np.array([self.seed, self.counter], dtype=np.uint64)
        self.counter += 1
        return np.random.Generator(np.random.Philox(key=key)).random(shape)


# -- gradient oracle -----------------------------------------------------------

def finite_diff_check(f, params, epsilon=1e-5):
    """Max over parameters of the relative error between the analytic
    gradient and central differences: |analytic - numeric| / max(|numeric|,
    1e-8), where |.| is the Euclidean norm of a parameter's gradient.

    `f` must rebuild and return a scalar Tensor on each call; run in 64-bit
    mode with dropout disabled.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    tape_start = len(_TAPE)
    out = f()
    if out.data.size != 1:
        raise ValueError("finite_diff_check requires a scalar function")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    del _TAPE[tape_start:]

    worst = 0.0
    with no_grad():
        for p, an in zip(params, analytic):
            flat = p.data.reshape(-1)
            num = np.empty_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                hi = float(f().data)
                flat[i] = orig - epsilon
                lo = float(f().data)
                flat[i] = orig
                num[i] = (hi - lo) / (2.0 * epsilon)
            diff = float(np.linalg.norm(an.reshape(-1) - num))
            rel = diff / max(float(np.linalg.norm(num)), 1e-8)
            if rel > worst:
                worst = rel
    return worst
