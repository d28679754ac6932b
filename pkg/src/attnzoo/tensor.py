"""Dense tensor primitives, each with its reverse-mode rule.

Every public operation is pure, checks its output for NaN/Inf and, when a
:class:`~attnzoo.autodiff.Tape` is active and tracks one of the operands,
records a vector-Jacobian product on it. Storage is a numpy array; leading
batch dimensions broadcast in ``matmul`` and the elementwise operations.
"""
from __future__ import annotations

import hashlib
import math
from typing import Sequence

import numpy as np
from scipy.special import erf

from .autodiff import current_tape
from .errors import DimensionError, NumericError

F32 = np.float32
F64 = np.float64
LN_EPS = 1e-6
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(F64)
        self.data = arr
        self.tape = None
        self.node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        tracked = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tracked})"

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
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose_last2(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and np.isscalar(x):
        # python scalars adopt the partner's precision via numpy promotion
        return Tensor(np.asarray(x))
    return Tensor(x, dtype=dtype)


def constant(x) -> Tensor:
    """Detached copy: no gradient flows through the result."""
    return Tensor(x.data if isinstance(x, Tensor) else x)


def _emit(name: str, data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{name}: produced non-finite values")
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.tape is tape for t in inputs):
        tape.record(name, inputs, out, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _scalar_dtype(a: Tensor, b: Tensor):
    # keep f32 graphs in f32 when mixed with python scalars
    if a.data.ndim == 0 and b.data.ndim > 0:
        return a.data.astype(b.dtype), b.data
    if b.data.ndim == 0 and a.data.ndim > 0:
        return a.data, b.data.astype(a.dtype)
    return a.data, b.data


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y = _scalar_dtype(a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", x + y, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y = _scalar_dtype(a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", x - y, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y = _scalar_dtype(a, b)
    return _emit("mul", x * y, (a, b),
                 lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y = _scalar_dtype(a, b)
    out = x / y
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", a.data * a.dtype.type(c), (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _emit("log", np.log(x), (a,), lambda g: (g / x,))


def gelu(a) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written through erf."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    out = (x * cdf).astype(x.dtype, copy=False)
    return _emit("gelu", out, (a,), lambda g: ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),))


# ------------------------------------------------------------------- shapes

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from e
    return _emit("reshape", out, (a,), lambda g: (g.reshape(src),))


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("permute", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def transpose_last2(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim < 2:
        raise DimensionError(f"transpose_last2 needs rank >= 2, got shape {a.shape}")
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axs = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axs]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -------------------------------------------------------------------- matmul

def matmul(a, b) -> Tensor:
    """Batched matrix product ``[..., M, K] @ [..., K, P]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from e
    x, y = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(y, -1, -2)), x.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(x, -1, -2), g), y.shape)
        return ga, gb

    return _emit("matmul", out, (a, b), vjp)


def linear(x, weight, bias=None) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 1:
        out = reshape(matmul(reshape(x, (1, x.shape[0])), weight), (as_tensor(weight).shape[-1],))
    else:
        out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


# ------------------------------------------------------------ normalisations

def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    a = as_tensor(a)
    if np.any(np.isnan(a.data)):
        raise NumericError("softmax: NaN input")
    if a.shape[axis] < 1:
        raise DimensionError("softmax: empty axis")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (a,), vjp)


def softmax_last(a) -> Tensor:
    return softmax(a, axis=-1)


def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis to zero mean / unit variance, then ``gamma*x + beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs channels {C}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g_, b_ = gamma.data, beta.data
    out = xhat * g_ + b_

    def vjp(g):
        gx_hat = g * g_
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(xd.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _emit("layer_norm", out, (x, gamma, beta), vjp)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Divide by ``max(||x||_2, eps)`` along ``axis``; zero slices stay zero."""
    x = as_tensor(x)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    den = np.maximum(norm, eps)
    out = xd / den
    active = norm > eps

    def vjp(g):
        # d(x/|x|) = (g - y <y, g>) / |x| where the norm is not clamped
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(active, (g - out * proj) / den, g / den),)

    return _emit("l2_normalize", out, (x,), vjp)


def l2_normalize_rows(x, eps: float = 1e-12) -> Tensor:
    return l2_normalize(x, axis=-1, eps=eps)


# -------------------------------------------------------------- convolution

def depthwise_conv3x3(x, kernel) -> Tensor:
    """Per-channel 3x3 convolution, stride 1, zero padding 1.

    ``x``: ``[..., H, W, C]``, ``kernel``: ``[3, 3, C]``. Output has the shape of ``x``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.shape != (3, 3, x.shape[-1]):
        raise DimensionError(f"depthwise_conv3x3: kernel {kernel.shape} vs input {x.shape}")
    xd, kd = x.data, kernel.data
    H, W = xd.shape[-3], xd.shape[-2]
    pad = [(0, 0)] * (xd.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    xp = np.pad(xd, pad)
    out = np.zeros_like(xd)
    for a in range(3):
        for b in range(3):
            out += xp[..., a:a + H, b:b + W, :] * kd[a, b]

    def vjp(g):
        gp = np.zeros_like(xp)
        gk = np.zeros_like(kd)
        red = tuple(range(xd.ndim - 1))
        for a in range(3):
            for b in range(3):
                gp[..., a:a + H, b:b + W, :] += g * kd[a, b]
                gk[a, b] = (xp[..., a:a + H, b:b + W, :] * g).sum(axis=red)
        return gp[..., 1:H + 1, 1:W + 1, :], gk

    return _emit("depthwise_conv3x3", out, (x, kernel), vjp)


# --------------------------------------------------------------------- loss

def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    B = logits.shape[0]
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def vjp(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / B),)

    return _emit("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), vjp)


# ---------------------------------------------------------------------- rng

class Rng:
    """Deterministic random stream: numpy's PCG64 seeded through SeedSequence.

    PCG64 output is specified bit-for-bit, so a given seed yields the same
    stream on every platform. ``child(key)`` derives an independent stream
    keyed by a string, which keeps draws for one component stable when other
    components are added or removed.
    """

    def __init__(self, seed: int = 0, _key: tuple = ()):
        self.seed = int(seed)
        self._key = _key
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=_key)))

    def child(self, key: str) -> "Rng":
        h = int.from_bytes(hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest(), "little")
        return Rng(self.seed, self._key + (h,))

    def normal(self, shape, dtype=F64) -> np.ndarray:
        return self._gen.standard_normal(shape).astype(dtype, copy=False)

    def uniform(self, shape, low=0.0, high=1.0, dtype=F64) -> np.ndarray:
        return self._gen.uniform(low, high, shape).astype(dtype, copy=False)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, n, size, replace=True):
        return self._gen.choice(n, size, replace=replace)

    def permutation(self, n):
        return self._gen.permutation(n)

    def trunc_normal(self, shape, std=0.02, bound=2.0, dtype=F64) -> np.ndarray:
        """Normal(0, std) truncated to ``[-bound*std, bound*std]`` by resampling."""
        z = self._gen.standard_normal(shape)
        bad = np.abs(z) > bound
        while bad.any():
            z[bad] = self._gen.standard_normal(int(bad.sum()))
            bad = np.abs(z) > bound
        return (z * std).astype(dtype, copy=False)


def orthogonal_gaussian(rng: Rng, rows: int, cols: int, dtype=F64) -> np.ndarray:
    """Random features with orthogonal rows inside each block of ``cols`` rows.

    Each block is the Q factor of a square Gaussian matrix; every row is then
    rescaled to the length of an independent ``cols``-dimensional Gaussian
    vector, so row norms are chi-distributed like unstructured draws.
    """
    blocks = []
    remaining = rows
    while remaining > 0:
        g = rng.normal((cols, cols))
        q, r = np.linalg.qr(g)
        # sign fix makes Q unique given G
        q = q * np.sign(np.diag(r))[None, :]
        take = min(remaining, cols)
        blocks.append(q.T[:take])
        remaining -= take
    w = np.concatenate(blocks, axis=0)
    lengths = np.linalg.norm(rng.normal((rows, cols)), axis=1)
    return (w * lengths[:, None]).astype(dtype)
