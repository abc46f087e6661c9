"""A small float64 tensor library with tape-based reverse-mode differentiation.

Only the operations the branched UNet needs are provided. Tensors are
immutable values; gradients come back from :func:`backward` as a mapping from
leaf tensors to arrays, and :func:`adam_step` returns fresh parameter tensors.

Usage::

    with Tape() as tape:
        loss = l1_loss(conv2d(x, w, 1, 1), y)
    grads = backward(loss)
"""

import contextvars
import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import ConfigurationError, DimensionError


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of the differentiation tape."""


_ACTIVE_TAPE = contextvars.ContextVar("active_tape", default=None)


def _check_finite(data, op):
    # the sum is finite iff every entry is, barring overflow, which is rechecked
    if not np.isfinite(data.sum()) and not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """Dense float64 array plus an optional handle into the active tape."""

    __slots__ = ("data", "requires_grad", "grad_id", "_tape", "__weakref__")

    def __init__(self, data, requires_grad=False, _op="tensor"):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        _check_finite(arr, _op)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad_id = None
        self._tape = None

    @classmethod
    def _wrap(cls, arr, op):
        # internal: adopt a freshly computed array without copying
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        _check_finite(arr, op)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.grad_id = None
        t._tape = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor._wrap(self.data, "detach")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    tensor: Tensor
    parents: tuple
    backward_fn: object  # grad_out -> tuple of parent grads (None where not needed)


@dataclass
class Tape:
    """Append-only record of differentiable operations.

    Nodes are appended in execution order, so every node's parents precede it
    and a single reverse sweep visits each node once.
    """

    nodes: list = field(default_factory=list)
    consumed: bool = False
    _token: object = None

    def __enter__(self):
        if self.consumed:
            raise TapeError("tape already consumed")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def _register(self, t):
        if t._tape is self:
            return t.grad_id
        t._tape = self
        t.grad_id = len(self.nodes)
        self.nodes.append(_Node(t, (), None))
        return t.grad_id

    def record(self, out, inputs, backward_fn):
        parents = []
        for x in inputs:
            if x._tape is self:
                parents.append(x.grad_id)
            elif x.requires_grad:
                parents.append(self._register(x))
            else:
                parents.append(None)
        out._tape = self
        out.grad_id = len(self.nodes)
        self.nodes.append(_Node(out, tuple(parents), backward_fn))
        return out

    def backward(self, loss):
        if self.consumed:
            raise TapeError("tape already consumed")
        if loss._tape is not self or loss.grad_id is None:
            raise TapeError("loss was not recorded on this tape (detached tensor?)")
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = [None] * len(self.nodes)
        grads[loss.grad_id] = np.ones_like(loss.data)
        leaves = {}
        for idx in range(loss.grad_id, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            node = self.nodes[idx]
            if node.backward_fn is None:
                leaves[node.tensor] = g
                continue
            for pid, pg in zip(node.parents, node.backward_fn(g)):
                if pid is None or pg is None:
                    continue
                grads[pid] = pg if grads[pid] is None else grads[pid] + pg
        self.consumed = True
        self.nodes = []
        return GradMap(leaves)


class GradMap(dict):
    """Mapping from leaf tensors to gradient arrays (identity-keyed)."""

    def of(self, t):
        g = self.get(t)
        return np.zeros_like(t.data) if g is None else g


def active_tape():
    return _ACTIVE_TAPE.get()


def _tracked(*xs):
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        return None
    for x in xs:
        if x.requires_grad or x._tape is tape:
            return tape
    return None


def _op(out_arr, inputs, backward_fn, name):
    out = Tensor._wrap(out_arr, name)
    tape = _tracked(*inputs)
    if tape is not None:
        tape.record(out, inputs, backward_fn)
    return out


def backward(loss):
    """Reverse sweep over the tape that recorded ``loss``; returns a :class:`GradMap`."""
    if not isinstance(loss, Tensor) or loss._tape is None:
        raise TapeError("backward() called on a tensor that is not recorded on a tape")
    return loss._tape.backward(loss)


# -- elementwise and reductions ----------------------------------------------


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _op(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data
    return _op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def tsum(x, axis=None):
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _op(x.data.sum(axis=axis), (x,), bw, "sum")


def mean(x, axis=None):
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis), 1.0 / n)


def tabs(x):
    x = as_tensor(x)
    # subgradient 0 at 0
    sign = np.sign(x.data)
    return _op(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def silu(x):
    x = as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig
    return _op(out, (x,), lambda g: (g * (sig * (1.0 + x.data * (1.0 - sig))),), "silu")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


ACTIVATIONS = {"silu": silu, "relu": relu}


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(xs, axis=1):
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _op(np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
               lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def add_channel_bias(x, b):
    """``x[B, C, H, W] + b[B, C]`` broadcast over the spatial axes."""
    x, b = as_tensor(x), as_tensor(b)
    if b.shape != x.shape[:2]:
        raise DimensionError(f"bias shape {b.shape} does not match {x.shape[:2]}")
    return _op(x.data + b.data[:, :, None, None], (x, b), lambda g: (g, g.sum(axis=(2, 3))), "add_channel_bias")


def linear(x, w, b=None):
    """``x[N, I] @ w[I, O] + b[O]``."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- convolutions ---------------------------------------------------------------


def _out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _im2col(x, k, stride, pad, ho, wo):
    """(B, C, H, W) -> (B, C, k, k, Ho, Wo) patches."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    b, c = x.shape[:2]
    cols = np.empty((b, c, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols


def _col2im(cols, h, w, k, stride, pad):
    """Adjoint of :func:`_im2col`: scatter-add (B, C, k, k, Ho, Wo) into (B, C, H, W)."""
    b, c = cols.shape[:2]
    ho, wo = cols.shape[4:]
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return out


def _check_conv_args(x, kernel, stride, pad, op):
    if x.ndim != 4:
        raise DimensionError(f"{op}: input must be (B, C, H, W), got {x.shape}")
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(f"{op}: kernel must be square 4-D, got {kernel.shape}")
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"{op}: need stride >= 1 and pad >= 0")


def conv2d(x, kernel, stride=1, pad=0):
    """Cross-correlation of ``x[B, C, H, W]`` with ``kernel[F, C, k, k]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_conv_args(x, kernel, stride, pad, "conv2d")
    b, c, h, w = x.shape
    f, kc, k, _ = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {kc}")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise DimensionError(f"conv2d: kernel {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    ho, wo = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    cols = _im2col(x.data, k, stride, pad, ho, wo).reshape(b, c * k * k, ho * wo)
    kmat = kernel.data.reshape(f, c * k * k)
    out = np.matmul(kmat, cols).reshape(b, f, ho, wo)

    def bw(g):
        gm = g.reshape(b, f, ho * wo)
        gk = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        gx = _col2im(np.matmul(kmat.T, gm).reshape(b, c, k, k, ho, wo), h, w, k, stride, pad)
        return gx, gk

    return _op(out, (x, kernel), bw, "conv2d")


def conv_transpose2d(x, kernel, stride=1, pad=0):
    """Transposed convolution of ``x[B, C, H, W]`` with ``kernel[C, F, k, k]``.

    Output side is ``(H - 1) * stride - 2 * pad + k``; this is the adjoint of
    :func:`conv2d` with the same kernel and geometry.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_conv_args(x, kernel, stride, pad, "conv_transpose2d")
    b, c, h, w = x.shape
    kc, f, k, _ = kernel.shape
    if kc != c:
        raise DimensionError(f"conv_transpose2d: input has {c} channels, kernel expects {kc}")
    ho, wo = (h - 1) * stride - 2 * pad + k, (w - 1) * stride - 2 * pad + k
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv_transpose2d: empty output for input {h}x{w}")
    xm = x.data.reshape(b, c, h * w)
    kmat = kernel.data.reshape(c, f * k * k)
    out = _col2im(np.matmul(kmat.T, xm).reshape(b, f, k, k, h, w), ho, wo, k, stride, pad)

    def bw(g):
        gcols = _im2col(g, k, stride, pad, h, w).reshape(b, f * k * k, h * w)
        gx = np.matmul(kmat, gcols).reshape(b, c, h, w)
        gk = np.matmul(xm, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        return gx, gk

    return _op(out, (x, kernel), bw, "conv_transpose2d")


# -- normalization ----------------------------------------------------------------

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels):
        return cls(np.zeros(channels), np.ones(channels))


def batch_norm(x, gamma, beta, running, mode="train", momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalization of ``x[B, C, H, W]``.

    Train mode normalizes with batch statistics and updates ``running`` in
    place (unbiased variance, fixed momentum); eval mode reads ``running``
    only.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise DimensionError(f"batch_norm: input must be (B, C, H, W), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    axes = (0, 2, 3)
    if mode == "train":
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        n = x.size // c
        running.mean = (1 - momentum) * running.mean + momentum * mu
        unbiased = var * n / (n - 1) if n > 1 else var
        running.var = (1 - momentum) * running.var + momentum * unbiased
    elif mode == "eval":
        mu, var = running.mean, running.var
    else:
        raise ConfigurationError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    gd = gamma.data[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gx_hat = g * gd
        if mode == "train":
            m = x.size // c
            gx = (inv[None, :, None, None] / m) * (
                m * gx_hat
                - gx_hat.sum(axis=axes, keepdims=True)
                - xhat * (gx_hat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gx_hat * inv[None, :, None, None]
        return gx, dgamma, dbeta

    return _op(out, (x, gamma, beta), bw, "batch_norm")


# -- embeddings and losses ----------------------------------------------------------


def sinusoidal_time_embedding(t, dim):
    """Transformer position encoding of step ``t``: interleaved sin/cos pairs."""
    if dim <= 0 or dim % 2:
        raise ConfigurationError(f"time embedding dim must be positive and even, got {dim}")
    ts = np.atleast_1d(np.asarray(t, dtype=np.float64))
    i = np.arange(dim // 2)
    freqs = 1.0 / np.power(10000.0, 2.0 * i / dim)
    ang = ts[:, None] * freqs[None, :]
    emb = np.empty((len(ts), dim))
    emb[:, 0::2] = np.sin(ang)
    emb[:, 1::2] = np.cos(ang)
    return Tensor._wrap(emb if np.ndim(t) else emb[0], "time_embedding")


def l1_loss(pred, target):
    """Mean absolute difference."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    return mean(tabs(sub(pred, target)))


def per_sample_l1(pred, target):
    """Mean absolute difference per leading index: (B, ...) -> (B,)."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"per_sample_l1: shape mismatch {pred.shape} vs {target.shape}")
    axes = tuple(range(1, pred.ndim))
    return mean(tabs(sub(pred, target)), axis=axes)


# -- optimizer -------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One bias-corrected Adam update.

    ``params`` maps names to tensors and ``grads`` maps the same names to
    arrays. Returns a new parameter dict; ``state`` is advanced in place.
    Raises :class:`NonFiniteError` before touching anything if a gradient is
    not finite.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if np.shape(g) != p.shape:
            raise DimensionError(f"gradient for {name} has shape {np.shape(g)}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name} at step {state.step + 1}; update aborted")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        upd = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[name] = Tensor(p.data - upd, requires_grad=p.requires_grad, _op=f"adam:{name}")
    return out


def kaiming_normal(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
