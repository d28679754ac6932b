"""Single-head attention kernels and the multi-head wrapper.

Kernels take ``q, k, v`` of shape ``[..., N, d]`` (any leading batch/head
dimensions) and return ``[..., N, d]``. Only :func:`multi_head` knows about
projections and head splitting.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, NumericError
from .tensor import Tensor

KINDS = ("sa", "la", "ea", "pa", "aa", "xca", "window")
XCA_MODES = ("paper_fixed_tau", "canonical")
NORMALIZER_FLOOR = 1e-30


@dataclass(frozen=True)
class AttentionSpec:
    kind: str = "sa"
    m_ratio: float = 0.25       # Linformer: m = ceil(N * m_ratio) per stage
    m: Optional[int] = None     # explicit Linformer length, overrides m_ratio
    r: Optional[int] = None     # Performer features; None -> head_dim // 2
    w: int = 7                  # window side
    xca_mode: str = "paper_fixed_tau"
    head_dim: int = 32

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown attention kind {self.kind!r}; expected one of {KINDS}")
        if self.xca_mode not in XCA_MODES:
            raise ConfigError(f"unknown xca_mode {self.xca_mode!r}")
        if self.head_dim < 1:
            raise ConfigError("head_dim must be >= 1")
        if self.w < 1:
            raise ConfigError("window side w must be >= 1")
        if self.r is not None and self.r < 1:
            raise ConfigError("Performer r must be >= 1")
        if self.m is not None and self.m < 1:
            raise ConfigError("Linformer m must be >= 1")
        if not 0 < self.m_ratio <= 1:
            raise ConfigError("m_ratio must lie in (0, 1]")

    def with_kind(self, kind: str) -> "AttentionSpec":
        return replace(self, kind=kind)

    @property
    def features(self) -> int:
        return self.r if self.r is not None else max(1, self.head_dim // 2)

    def m_for(self, n_tokens: int) -> int:
        m = self.m if self.m is not None else math.ceil(n_tokens * self.m_ratio)
        if m > n_tokens:
            raise ConfigError(f"Linformer m={m} exceeds token count N={n_tokens}")
        return m

    def window_for(self, grid: tuple) -> int:
        """Window side used on ``grid``; clamped to the grid when the grid is smaller."""
        H, W = grid
        w = min(self.w, H, W)
        if H % w or W % w:
            raise ConfigError(f"window side {w} does not divide token grid {H}x{W}")
        return w

    def validate(self, n_tokens: int, channels: int, grid: Optional[tuple] = None):
        if n_tokens < 1:
            raise ConfigError("token count must be >= 1")
        if channels % self.head_dim:
            raise ConfigError(f"channels {channels} not divisible by head_dim {self.head_dim}")
        if self.kind == "la":
            self.m_for(n_tokens)
        if self.kind == "window":
            if grid is None or grid[0] * grid[1] != n_tokens:
                raise ConfigError(f"window attention needs a token grid covering N={n_tokens}")
            self.window_for(grid)


@dataclass
class AttentionParams:
    """Per-layer attention weights. Variant extras are None when unused."""
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wout: Tensor
    bout: Tensor
    w_proj: Optional[Tensor] = None      # la: [m, N], shared per stage
    omega: Optional[Tensor] = None       # pa: [r, d], frozen
    wq_pool: Optional[Tensor] = None     # aa: [h, d]
    wk_pool: Optional[Tensor] = None     # aa: [h, d]
    tau: Optional[Tensor] = None         # xca canonical: [h]


def _check_qkv(name, q, k, v, same_tokens=True):
    bad_q = q.shape != k.shape if same_tokens else q.shape[-1] != k.shape[-1]
    if q.ndim < 2 or bad_q or k.shape[:-1] != v.shape[:-1]:
        raise DimensionError(f"{name}: q/k/v shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    if q.shape[-2] < 1:
        raise DimensionError(f"{name}: empty token axis")


# ------------------------------------------------------------------ kernels

def sa(q, k, v) -> Tensor:
    """Dot-product softmax attention, ``softmax(q k^T / sqrt(d)) v``."""
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    _check_qkv("sa", q, k, v, same_tokens=False)
    d = q.shape[-1]
    scores = T.scale(T.matmul(q, T.transpose_last2(k)), 1.0 / math.sqrt(d))
    return T.matmul(T.softmax_last(scores), v)


def la(q, k, v, w_proj) -> Tensor:
    """Linformer: keys and values are compressed along the token axis by ``w_proj`` [m, N]."""
    q, k, v, w_proj = (T.as_tensor(t) for t in (q, k, v, w_proj))
    _check_qkv("la", q, k, v)
    if w_proj.shape[-1] != k.shape[-2]:
        raise DimensionError(f"la: w_proj {w_proj.shape} does not match N={k.shape[-2]}")
    return sa(q, T.matmul(w_proj, k), T.matmul(w_proj, v))


def ea(q, k, v) -> Tensor:
    """Efficient attention: ``softmax_features(q) @ (softmax_tokens(k)^T @ v)``.

    The ``d x d`` context is formed first, so cost is linear in N.
    """
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    _check_qkv("ea", q, k, v)
    context = T.matmul(T.transpose_last2(T.softmax(k, axis=-2)), v)
    return T.matmul(T.softmax_last(q), context)


def performer_features(x, omega, is_query: bool) -> Tensor:
    """Positive random features ``r^-1/2 exp(omega x' - |x'|^2 / 2)``, ``x' = x d^-1/4``.

    A stabilising shift is subtracted from the exponent: per row for queries,
    one shift per head for keys. Both cancel in the attention ratio.
    """
    x, omega = T.as_tensor(x), T.as_tensor(omega)
    d = x.shape[-1]
    r = omega.shape[-2]
    xs = T.scale(x, d ** -0.25)
    proj = T.matmul(xs, T.transpose_last2(omega))
    sq = T.scale(T.sum(T.mul(xs, xs), axis=-1, keepdims=True), 0.5)
    expo = T.sub(proj, sq)
    if is_query:
        shift = expo.data.max(axis=-1, keepdims=True)
    else:
        shift = expo.data.max(axis=(-2, -1), keepdims=True)
    return T.scale(T.exp(T.sub(expo, T.constant(shift))), r ** -0.5)


def pa(q, k, v, omega) -> Tensor:
    """Performer (FAVOR+) attention with frozen features ``omega`` [r, d]."""
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    _check_qkv("pa", q, k, v)
    if omega is None:
        raise ConfigError("pa: random feature matrix omega is required")
    omega = T.constant(omega)
    if omega.shape[-1] != q.shape[-1]:
        raise DimensionError(f"pa: omega {omega.shape} does not match head dim {q.shape[-1]}")
    fq = performer_features(q, omega, True)
    fk = performer_features(k, omega, False)
    kv = T.matmul(T.transpose_last2(fk), v)                 # [r, d]
    ksum = T.sum(fk, axis=-2, keepdims=True)                # [1, r]
    num = T.matmul(fq, kv)
    den = T.matmul(fq, T.transpose_last2(ksum))             # [N, 1]
    if np.min(den.data) < NORMALIZER_FLOOR:
        raise NumericError("pa: normalizer underflow; rescale q/k (smaller magnitudes)")
    return T.div(num, den)


def xca(q, k, v, tau=None, mode: str = "canonical") -> Tensor:
    """Cross-covariance attention over the ``d x d`` feature affinity.

    ``canonical``: q, k columns are l2-normalised over tokens, ``tau`` is a
    (possibly learnable) temperature. ``paper_fixed_tau``: no normalisation
    and ``tau = N / 2`` unless given explicitly.
    """
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    _check_qkv("xca", q, k, v)
    if mode not in XCA_MODES:
        raise ConfigError(f"unknown xca mode {mode!r}")
    n = q.shape[-2]
    if mode == "canonical":
        q = T.l2_normalize(q, axis=-2)
        k = T.l2_normalize(k, axis=-2)
        if tau is None:
            tau = 1.0
    elif tau is None:
        tau = n / 2.0
    tau_t = T.as_tensor(tau)
    if np.any(tau_t.data <= 0):
        raise ConfigError("xca: tau must be positive")
    aff = T.matmul(T.transpose_last2(q), k)                 # [d, d]
    if isinstance(tau, Tensor):
        scores = T.div(aff, tau_t)
    else:
        scores = T.scale(aff, 1.0 / float(tau))
    attn = T.softmax_last(scores)
    return T.matmul(v, T.transpose_last2(attn))


def aa_mix(q, k, v, wq_pool, wk_pool) -> Tensor:
    """Fastformer additive pooling; returns ``k' * v`` before the output projection.

    ``wq_pool``/``wk_pool`` have shape ``[..., d]`` (one vector per head).
    """
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    _check_qkv("aa", q, k, v)
    wq_pool, wk_pool = T.as_tensor(wq_pool), T.as_tensor(wk_pool)
    d = q.shape[-1]
    if wq_pool.shape[-1] != d or wk_pool.shape[-1] != d:
        raise DimensionError(f"aa: pooling vectors {wq_pool.shape}/{wk_pool.shape} vs head dim {d}")
    inv = 1.0 / math.sqrt(d)
    wq_col = T.reshape(wq_pool, wq_pool.shape + (1,))
    wk_col = T.reshape(wk_pool, wk_pool.shape + (1,))
    alpha = T.softmax(T.scale(T.matmul(q, wq_col), inv), axis=-2)       # [N, 1]
    q_glob = T.sum(T.mul(alpha, q), axis=-2, keepdims=True)             # [1, d]
    p = T.mul(q_glob, k)
    beta = T.softmax(T.scale(T.matmul(p, wk_col), inv), axis=-2)
    k_glob = T.sum(T.mul(beta, p), axis=-2, keepdims=True)
    return T.mul(k_glob, v)


def aa(q, k, v, wq_pool, wk_pool, w_out) -> Tensor:
    """Additive attention ``q + (k' * v) W``."""
    u = aa_mix(q, k, v, wq_pool, wk_pool)
    return T.add(T.as_tensor(q), T.matmul(u, T.as_tensor(w_out)))


def _window_axes(lead: int):
    base = [0, 2, 1, 3, 4]
    return list(range(lead)) + [lead + a for a in base]


def window_partition(x, w: int, grid: tuple) -> Tensor:
    """``[..., H*W, d]`` -> ``[..., (H/w)*(W/w), w*w, d]``, windows in row-major order."""
    x = T.as_tensor(x)
    H, W = grid
    lead = x.shape[:-2]
    d = x.shape[-1]
    x = T.reshape(x, lead + (H // w, w, W // w, w, d))
    x = T.permute(x, _window_axes(len(lead)))
    return T.reshape(x, lead + ((H // w) * (W // w), w * w, d))


def window_reverse(x, w: int, grid: tuple) -> Tensor:
    x = T.as_tensor(x)
    H, W = grid
    lead = x.shape[:-3]
    d = x.shape[-1]
    x = T.reshape(x, lead + (H // w, W // w, w, w, d))
    x = T.permute(x, _window_axes(len(lead)))
    return T.reshape(x, lead + (H * W, d))


def window_sa(q, k, v, w: int, grid: tuple) -> Tensor:
    """Softmax attention restricted to non-overlapping ``w x w`` windows of the token grid."""
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    _check_qkv("window_sa", q, k, v)
    H, W = grid
    if H * W != q.shape[-2]:
        raise ConfigError(f"window_sa: grid {H}x{W} does not cover N={q.shape[-2]}")
    if w < 1 or H % w or W % w:
        raise ConfigError(f"window_sa: window {w} does not divide grid {H}x{W}")
    out = sa(*(window_partition(t, w, grid) for t in (q, k, v)))
    return window_reverse(out, w, grid)


# ---------------------------------------------------------------- multi-head

def split_heads(x, heads: int) -> Tensor:
    lead = x.shape[:-2]
    n, c = x.shape[-2:]
    x = T.reshape(x, lead + (n, heads, c // heads))
    L = len(lead)
    return T.permute(x, list(range(L)) + [L + 1, L, L + 2])


def merge_heads(x) -> Tensor:
    lead = x.shape[:-3]
    h, n, d = x.shape[-3:]
    L = len(lead)
    x = T.permute(x, list(range(L)) + [L + 1, L, L + 2])
    return T.reshape(x, lead + (n, h * d))


def multi_head(x, params: AttentionParams, spec: AttentionSpec, grid: Optional[tuple] = None) -> Tensor:
    """Project ``x`` [..., N, C] to heads, run the configured kernel, project back.

    Additive attention consumes the output projection inside its own
    residual form, so it is not applied a second time.
    """
    x = T.as_tensor(x)
    n, C = x.shape[-2:]
    spec.validate(n, C, grid)
    heads = C // spec.head_dim
    q = split_heads(T.matmul(x, params.wq), heads)
    k = split_heads(T.matmul(x, params.wk), heads)
    v = split_heads(T.matmul(x, params.wv), heads)
    kind = spec.kind
    if kind == "aa":
        u = aa_mix(q, k, v, params.wq_pool, params.wk_pool)
        q_full = merge_heads(q)
        return T.add(q_full, T.linear(merge_heads(u), params.wout, params.bout))
    if kind == "sa":
        out = sa(q, k, v)
    elif kind == "la":
        out = la(q, k, v, params.w_proj)
    elif kind == "ea":
        out = ea(q, k, v)
    elif kind == "pa":
        out = pa(q, k, v, params.omega)
    elif kind == "xca":
        if spec.xca_mode == "canonical":
            tau = T.reshape(params.tau, (heads, 1, 1))
            out = xca(q, k, v, tau, "canonical")
        else:
            out = xca(q, k, v, n / 2.0, "paper_fixed_tau")
    else:
        out = window_sa(q, k, v, spec.window_for(grid), grid)
    return T.linear(merge_heads(out), params.wout, params.bout)
