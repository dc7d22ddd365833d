"""Dense NCHW tensors with a reverse-mode differentiation tape.

Operations are plain functions over :class:`Tensor`. While a :class:`Tape` is
active (``with Tape() as tape:``) every operation that has an input requiring a
gradient appends a vector-Jacobian product to the tape. ``tape.backward(loss)``
replays those records once, newest first, and returns a :class:`Gradients`
mapping.

Storage is float32 by default. Convolutions and reductions accumulate in
float64 and round once on output. Passing float64 tensors runs the whole graph
in float64, which is what the finite-difference checks use.
"""
import threading
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ContractError, DimensionError, NumericalError

__all__ = [
    "Tensor", "Tape", "Gradients", "BatchNormStats", "make_op",
    "add", "sub", "mul", "neg", "absolute", "square", "tsum", "tmean", "reshape",
    "conv2d", "upsample_nearest", "avg_pool2d", "max_pool2d", "batch_norm",
    "relu", "leaky_relu", "activation", "sigmoid", "concat_channels", "apply_mask",
    "weighted_sum", "conv_array", "conv_array_grads", "check_gradients",
]

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An n-dimensional float array that can take part in differentiation.

    Feature maps are (N, C, H, W); filters (Cout, Cin, Kh, Kw); biases (C,);
    losses are 0-d.
    """

    __slots__ = ("data", "requires_grad", "name")
    __array_ufunc__ = None  # make ``ndarray * Tensor`` defer to Tensor

    def __init__(self, data, requires_grad=False, dtype=np.float32, name=None):
        arr = np.array(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            raise ContractError(f"tensor dtype must be float32 or float64, got {arr.dtype}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by a constant")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def abs(self):
        return absolute(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Gradients:
    """Gradient lookup keyed by tensor identity.

    Tensors that were not on any path to the loss get an all-zero gradient.
    """

    def __init__(self, grads, tensors):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, tensor):
        g = self._grads.get(id(tensor))
        if g is None:
            return np.zeros_like(tensor.data)
        return g

    def __contains__(self, tensor):
        return id(tensor) in self._grads

    def __len__(self):
        return len(self._grads)

    def items(self):
        for key, g in self._grads.items():
            yield self._tensors[key], g


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    vjp: object


class Tape:
    """Records operations for one forward pass; single use."""

    def __init__(self):
        self._records = []
        self._consumed = False
        self.replayed = 0

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out, inputs, vjp):
        if self._consumed:
            raise ContractError("tape already replayed; start a new Tape for a new forward pass")
        self._records.append(_Record(out, inputs, vjp))

    def backward(self, loss):
        """Replay the tape from a scalar ``loss``; returns :class:`Gradients`."""
        if self._consumed:
            raise ContractError("tape already replayed")
        if not isinstance(loss, Tensor) or loss.size != 1:
            shape = getattr(loss, "shape", type(loss).__name__)
            raise ContractError(f"backward needs a scalar loss, got shape {shape}")
        if not loss.requires_grad:
            raise ContractError("loss was not produced through this tape")
        pending = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        tensors = {}
        for rec in reversed(self._records):
            g = pending.pop(id(rec.out), None)
            if g is None:
                continue
            self.replayed += 1
            for t, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                gi = np.asarray(gi, dtype=t.dtype)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
                tensors[key] = t
        # anything still pending was never an op output: it is a leaf
        for key, g in pending.items():
            if key in tensors:
                leaves[key] = g
        if id(loss) in pending and id(loss) not in tensors:
            leaves[id(loss)] = pending[id(loss)]
            tensors[id(loss)] = loss
        self._records = []
        self._consumed = True
        return Gradients(leaves, tensors)


def make_op(data, inputs, vjp, dtype=None):
    """Wrap ``data`` as the output of an operation and record it if needed.

    ``vjp(g)`` must return one gradient (or None) per entry of ``inputs``.
    """
    if dtype is None:
        dtype = _result_dtype(inputs)
    with np.errstate(over="ignore", invalid="ignore"):
        data = np.asarray(data, dtype=dtype)
    if not np.isfinite(data).all():
        raise NumericalError("operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, tuple(inputs), vjp)
    return out


def _result_dtype(inputs):
    for t in inputs:
        if t.dtype == np.float64:
            return np.float64
    return np.float32


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x), dtype=dtype)


def _operands(a, b):
    ta = _wrap(a, b if isinstance(b, Tensor) else None)
    tb = _wrap(b, ta)
    try:
        shape = np.broadcast_shapes(ta.shape, tb.shape)
    except ValueError as exc:
        raise DimensionError(f"operand shapes {ta.shape} and {tb.shape} do not match") from exc
    for t in (ta, tb):
        if t.requires_grad and t.shape != shape:
            raise DimensionError(
                f"shape {t.shape} would broadcast to {shape}; only constants may broadcast")
    return ta, tb


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _operands(a, b)
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _operands(a, b)
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _operands(a, b)
    return make_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def neg(a):
    return make_op(-a.data, (a,), lambda g: (-g,))


def absolute(a):
    # subgradient 0 at 0
    return make_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a):
    return make_op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def tsum(a):
    total = a.data.sum(dtype=np.float64)
    return make_op(total, (a,), lambda g: (np.broadcast_to(g, a.shape),))


def tmean(a):
    n = a.size
    total = a.data.sum(dtype=np.float64) / n
    return make_op(total, (a,), lambda g: (np.broadcast_to(g / n, a.shape),))


def reshape(a, shape):
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, index):
    def vjp(g):
        full = np.zeros(a.shape, dtype=np.result_type(g, a.dtype))
        full[index] += g
        return (full,)
    return make_op(a.data[index], (a,), vjp)


def apply_mask(x, mask):
    """Zero ``x`` wherever the constant ``mask`` is 0 (mask broadcasts over channels)."""
    keep = np.asarray(mask) > 0
    return make_op(np.where(keep, x.data, 0.0), (x,), lambda g: (np.where(keep, g, 0.0),))


def weighted_sum(terms, weights):
    """``sum(w * t)`` over scalar tensors, accumulated in float64 and rounded once."""
    terms = list(terms)
    weights = [float(w) for w in weights]
    if len(terms) != len(weights):
        raise ContractError(f"{len(terms)} terms but {len(weights)} weights")
    total = np.float64(0.0)
    for t, w in zip(terms, weights):
        total += w * np.float64(t.data)
    return make_op(total, tuple(terms), lambda g: tuple(g * w for w in weights))


# ---------------------------------------------------------------- activations

def relu(x):
    pos = x.data > 0
    return make_op(np.where(pos, x.data, 0.0), (x,), lambda g: (np.where(pos, g, 0.0),))


def leaky_relu(x, slope=0.2):
    if not 0.0 < slope < 1.0:
        raise ContractError(f"leaky slope must lie in (0, 1), got {slope}")
    pos = x.data > 0
    return make_op(np.where(pos, x.data, slope * x.data), (x,),
                   lambda g: (np.where(pos, g, slope * g),))


def activation(x, kind, slope=0.2):
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    raise ContractError(f"unknown activation {kind!r}")


_SIG_LO = float(np.finfo(np.float32).tiny)
_SIG_HI = 1.0 - 2.0 ** -24


def sigmoid(x):
    """Logistic function, clamped into the open interval (0, 1) at float32 resolution."""
    s = expit(x.data.astype(np.float64))
    return make_op(np.clip(s, _SIG_LO, _SIG_HI), (x,), lambda g: (g * s * (1.0 - s),))


# ---------------------------------------------------------------- convolution

def _windows(x, kh, kw, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _conv_out_extent(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv_array(x, w, stride=1, pad=0):
    """Bias-free cross-correlation of plain arrays, computed in float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    win = _windows(x, w.shape[2], w.shape[3], stride, pad)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv_array_grads(g, x, w, stride=1, pad=0, need_x=True, need_w=True):
    """Gradients of :func:`conv_array` w.r.t. input and filter (float64)."""
    g = np.asarray(g, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    kh, kw = w.shape[2], w.shape[3]
    dx = dw = None
    if need_w:
        win = _windows(x, kh, kw, stride, pad)
        dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    if need_x:
        n, c, h, wd = x.shape
        ho, wo = g.shape[2], g.shape[3]
        cols = np.tensordot(g, w, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
        dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                    j:j + stride * (wo - 1) + 1:stride] += cols[..., i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, pad:pad + h, pad:pad + wd]
    return dx, dw


def check_conv_args(x, w, b, stride, pad):
    if x.ndim != 4:
        raise DimensionError(f"input must be 4-D (N, C, H, W), got shape {x.shape}")
    if w.ndim != 4:
        raise DimensionError(f"filter must be 4-D (Cout, Cin, Kh, Kw), got shape {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"channel axis (1): input has {x.shape[1]} channels, filter expects {w.shape[1]}")
    if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
        raise ContractError(f"kernel extents must be odd, got {w.shape[2]}x{w.shape[3]}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"bias axis (0): expected length {w.shape[0]}, got shape {b.shape}")
    if stride < 1 or pad < 0:
        raise ContractError(f"stride must be positive and pad non-negative (got {stride}, {pad})")
    ho = _conv_out_extent(x.shape[2], w.shape[2], stride, pad)
    wo = _conv_out_extent(x.shape[3], w.shape[3], stride, pad)
    if ho < 1 or wo < 1:
        raise DimensionError(f"height/width axes (2, 3): {x.shape[2:]} too small for kernel")


def conv2d(x, w, b=None, stride=1, pad=0):
    """Zero-padded 2-D cross-correlation plus per-channel bias."""
    check_conv_args(x, w, b, stride, pad)
    raw = conv_array(x.data, w.data, stride, pad)
    if b is not None:
        raw = raw + b.data.astype(np.float64)[None, :, None, None]
    inputs = (x, w) if b is None else (x, w, b)

    def vjp(g):
        dx, dw = conv_array_grads(g, x.data, w.data, stride, pad,
                                  need_x=x.requires_grad, need_w=w.requires_grad)
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3), dtype=np.float64)

    return make_op(raw, inputs, vjp)


# ---------------------------------------------------------------- resampling

def upsample_nearest(x, factor=2):
    if factor < 1:
        raise ContractError(f"upsampling factor must be >= 1, got {factor}")
    if factor == 1:
        return make_op(x.data, (x,), lambda g: (g,))
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    return make_op(out, (x,),
                   lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),))


def _pool_view(x, k):
    n, c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"height/width axes (2, 3): {h}x{w} not divisible by pool size {k}")
    return x.reshape(n, c, h // k, k, w // k, k)


def avg_pool2d(x, k=2):
    view = _pool_view(x.data, k)
    out = view.mean(axis=(3, 5), dtype=np.float64)

    def vjp(g):
        return (np.repeat(np.repeat(g / (k * k), k, axis=2), k, axis=3),)
    return make_op(out, (x,), vjp)


def max_pool2d(x, k=2):
    n, c, h, w = x.shape
    view = _pool_view(x.data, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
    arg = view.argmax(axis=-1)
    out = np.take_along_axis(view, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        hot = np.zeros(view.shape, dtype=g.dtype)
        np.put_along_axis(hot, arg[..., None], g[..., None], axis=-1)
        hot = hot.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (hot.reshape(n, c, h, w),)
    return make_op(out, (x,), vjp)


def concat_channels(a, b):
    if a.ndim != 4 or b.ndim != 4:
        raise DimensionError("concat_channels needs 4-D tensors")
    for axis, label in ((0, "batch"), (2, "height"), (3, "width")):
        if a.shape[axis] != b.shape[axis]:
            raise DimensionError(
                f"{label} axis ({axis}) differs: {a.shape[axis]} vs {b.shape[axis]}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data.astype(a.dtype, copy=False)], axis=1)
    return make_op(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


# ---------------------------------------------------------------- normalization

@dataclass
class BatchNormStats:
    """Running per-channel statistics used in eval mode."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels, momentum=0.1):
        return cls(np.zeros(channels, np.float32), np.ones(channels, np.float32), momentum)


def batch_norm(x, gamma, beta, stats=None, *, train=True, eps=1e-5):
    """Per-channel normalization over (N, H, W).

    In train mode the batch statistics are used and, when ``stats`` is given,
    its running averages are updated in place. Eval mode requires ``stats``.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"channel axis (1): gamma/beta must have length {c}, got {gamma.shape}/{beta.shape}")
    xd = x.data.astype(np.float64)
    if train:
        m = x.size // c
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        if stats is not None:
            mom = stats.momentum
            unbiased = var * m / max(m - 1, 1)
            stats.running_mean[...] = (1 - mom) * stats.running_mean + mom * mean
            stats.running_var[...] = (1 - mom) * stats.running_var + mom * unbiased
    else:
        if stats is None:
            raise ContractError("eval-mode batch_norm needs running statistics")
        mean = stats.running_mean.astype(np.float64)
        var = stats.running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
    gd = gamma.data.astype(np.float64)[None, :, None, None]
    out = gd * xhat + beta.data.astype(np.float64)[None, :, None, None]

    def vjp(g):
        g = g.astype(np.float64)
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd
        if train:
            dx = (dxhat - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
            dx = dx * inv_std[None, :, None, None]
        else:
            dx = dxhat * inv_std[None, :, None, None]
        return dx, dgamma, dbeta

    return make_op(out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------- gradient checks

@dataclass
class GradCheckResult:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float
    skipped: bool


def check_gradients(fn, inputs, *, coords=20, h=1e-3, seed=0, kink_tol=1e-5):
    """Compare tape gradients with central differences at random coordinates.

    ``fn`` maps a dict of tensors to a scalar tensor; ``inputs`` maps the same
    names to arrays. Everything runs in float64. A coordinate is marked
    skipped when the central differences at ``h`` and ``h/2`` disagree, which
    signals a kink (ReLU, absolute value) inside the probe interval.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    params = {k: Tensor(v, requires_grad=True, dtype=np.float64) for k, v in base.items()}
    with Tape() as tape:
        loss = fn(params)
    grads = tape.backward(loss)
    rng = np.random.default_rng(seed)
    results = []
    for name, arr in base.items():
        analytic = grads[params[name]]
        picks = rng.choice(arr.size, size=min(coords, arr.size), replace=False)
        for flat in picks:
            idx = np.unravel_index(flat, arr.shape)

            def f(delta):
                moved = arr.copy()
                moved[idx] += delta
                feed = {k: Tensor(moved if k == name else v, dtype=np.float64)
                        for k, v in base.items()}
                return float(fn(feed).data)

            d1 = (f(h) - f(-h)) / (2 * h)
            d2 = (f(h / 2) - f(-h / 2)) / h
            a = float(analytic[idx])
            skipped = abs(d1 - d2) > kink_tol * max(abs(d1), 1e-3)
            rel = abs(a - d1) / max(abs(a), abs(d1), 1e-8)
            results.append(GradCheckResult(name, tuple(int(i) for i in idx), a, d1, rel, skipped))
    return results
