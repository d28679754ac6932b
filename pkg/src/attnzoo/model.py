"""Pyramid and columnar vision-transformer skeletons built from the attention zoo.

A model is a :class:`ModelConfig` plus a flat dict of named numpy arrays.
The forward pass is functional: it takes the parameters as Tensors so the
same code serves inference (constants) and training (tape leaves).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .attention import AttentionParams, AttentionSpec, multi_head
from .errors import ConfigError, DimensionError
from .tensor import Rng, Tensor

POS_HIDDEN = 64          # sinusoid features before the learned projection
POS_FREQS = 16           # frequency pairs per spatial axis
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    structure: str = "pyramid"
    patch_size: int = 4
    image_size: int = 224
    depths: tuple = (2, 2, 6, 2)
    dims: tuple = (96, 192, 384, 768)
    attention: AttentionSpec = field(default_factory=AttentionSpec)
    lpi: bool = False
    num_classes: int = 1000
    mlp_ratio: int = 4
    in_chans: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        self.validate()

    def validate(self):
        if self.structure not in ("pyramid", "columnar"):
            raise ConfigError(f"structure must be 'pyramid' or 'columnar', got {self.structure!r}")
        if len(self.depths) != len(self.dims) or not self.depths:
            raise ConfigError("depths and dims must be non-empty and of equal length")
        if self.structure == "columnar" and len(self.dims) != 1:
            raise ConfigError("columnar models have exactly one stage")
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigError(f"image side {self.image_size} not divisible by patch size {self.patch_size}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        side = self.image_size // self.patch_size
        for s, dim in enumerate(self.dims):
            if dim % self.attention.head_dim:
                raise ConfigError(f"stage {s} dim {dim} not divisible by head_dim {self.attention.head_dim}")
            if s < len(self.dims) - 1:
                if side % 2:
                    raise ConfigError(f"stage {s} token grid {side}x{side} cannot be merged 2x2")
                side //= 2
        for s, (grid, dim) in enumerate(zip(self.grids, self.dims)):
            self.attention.validate(grid[0] * grid[1], dim, grid)

    @property
    def grids(self) -> list:
        side = self.image_size // self.patch_size
        out = []
        for _ in self.dims:
            out.append((side, side))
            side //= 2
        return out

    @property
    def tokens(self) -> list:
        return [h * w for h, w in self.grids]

    @property
    def heads(self) -> list:
        return [d // self.attention.head_dim for d in self.dims]

    def with_attention(self, **kw) -> "ModelConfig":
        return replace(self, attention=replace(self.attention, **kw))


def pyramid_config(kind: str = "sa", patch_size: int = 4, lpi: bool = False, **kw) -> ModelConfig:
    """The 224px four-stage model; Swin rows use w=7 (P=4) or w=8 (P=7)."""
    w = kw.pop("w", 7 if patch_size == 4 else 8)
    att = AttentionSpec(kind=kind, w=w, **{k: kw.pop(k) for k in list(kw) if k in
                                           ("m_ratio", "m", "r", "xca_mode", "head_dim")})
    return ModelConfig(structure="pyramid", patch_size=patch_size, attention=att, lpi=lpi, **kw)


def columnar_config(patch_size: int = 16, **kw) -> ModelConfig:
    return ModelConfig(structure="columnar", patch_size=patch_size, depths=(12,), dims=(384,),
                       attention=AttentionSpec(kind="sa"), **kw)


def tiny_config(kind: str = "sa", image_size: int = 32, lpi: bool = False, **kw) -> ModelConfig:
    """Desk-scale pyramid: 4x4 patches, dims 16/32/64/128, one block per stage, 16-channel heads."""
    att_kw = {"head_dim": 16, "w": 4}
    att_kw.update({k: kw.pop(k) for k in ("xca_mode", "r", "m", "m_ratio", "w") if k in kw})
    att = AttentionSpec(kind=kind, **att_kw)
    return ModelConfig(structure="pyramid", patch_size=4, image_size=image_size, depths=(1, 1, 1, 1),
                       dims=(16, 32, 64, 128), attention=att, lpi=lpi,
                       num_classes=kw.pop("num_classes", 2), **kw)


# ------------------------------------------------------------ parameters

def param_shapes(config: ModelConfig) -> tuple[dict, dict]:
    """Ordered ``name -> shape`` maps for learnable parameters and frozen buffers."""
    c = config
    att = c.attention
    P = c.patch_size
    params: dict = {}
    buffers: dict = {}
    C0 = c.dims[0]
    params["patch_embed.weight"] = (c.in_chans * P * P, C0)
    params["patch_embed.bias"] = (C0,)
    params["pos_embed.weight"] = (POS_HIDDEN, C0)
    params["pos_embed.bias"] = (C0,)
    for s, (dim, depth, n) in enumerate(zip(c.dims, c.depths, c.tokens)):
        h = dim // att.head_dim
        d = att.head_dim
        if att.kind == "la":
            params[f"stages.{s}.la_proj"] = (att.m_for(n), n)
        for b in range(depth):
            p = f"stages.{s}.blocks.{b}."
            params[p + "norm1.gamma"] = (dim,)
            params[p + "norm1.beta"] = (dim,)
            for name in ("wq", "wk", "wv", "wout"):
                params[p + "attn." + name] = (dim, dim)
            params[p + "attn.bout"] = (dim,)
            if att.kind == "aa":
                params[p + "attn.wq_pool"] = (h, d)
                params[p + "attn.wk_pool"] = (h, d)
            if att.kind == "xca" and att.xca_mode == "canonical":
                params[p + "attn.tau"] = (h,)
            if att.kind == "pa":
                buffers[p + "attn.omega"] = (att.features, d)
            if c.lpi:
                params[p + "norm_lpi.gamma"] = (dim,)
                params[p + "norm_lpi.beta"] = (dim,)
                for conv in ("conv1", "conv2"):
                    params[p + f"lpi.{conv}.kernel"] = (3, 3, dim)
                    params[p + f"lpi.{conv}.bias"] = (dim,)
            params[p + "norm2.gamma"] = (dim,)
            params[p + "norm2.beta"] = (dim,)
            hidden = dim * c.mlp_ratio
            params[p + "mlp.fc1.weight"] = (dim, hidden)
            params[p + "mlp.fc1.bias"] = (hidden,)
            params[p + "mlp.fc2.weight"] = (hidden, dim)
            params[p + "mlp.fc2.bias"] = (dim,)
        if c.structure == "pyramid" and s < len(c.dims) - 1:
            nxt = c.dims[s + 1]
            params[f"stages.{s}.merge.weight"] = (4 * dim, nxt)
            params[f"stages.{s}.merge.norm.gamma"] = (nxt,)
            params[f"stages.{s}.merge.norm.beta"] = (nxt,)
    params["head.weight"] = (c.dims[-1], c.num_classes)
    params["head.bias"] = (c.num_classes,)
    return params, buffers


def _init_array(name: str, shape: tuple, rng: Rng, dtype) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gamma":
        return np.ones(shape, dtype)
    if leaf in ("beta", "bias", "bout"):
        return np.zeros(shape, dtype)
    if leaf == "tau":
        return np.ones(shape, dtype)
    if leaf == "omega":
        return T.orthogonal_gaussian(rng, shape[0], shape[1], dtype)
    return rng.trunc_normal(shape, std=INIT_STD, dtype=dtype)


@dataclass
class Model:
    config: ModelConfig
    params: dict
    buffers: dict

    def num_params(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    def astype(self, dtype) -> "Model":
        return Model(self.config, {k: v.astype(dtype) for k, v in self.params.items()},
                     {k: v.astype(dtype) for k, v in self.buffers.items()})


def init_model(config: ModelConfig, seed: Optional[int] = None, dtype=T.F32) -> Model:
    """Instantiate parameters; each array draws from its own name-keyed stream."""
    rng = Rng(config.seed if seed is None else seed)
    pshapes, bshapes = param_shapes(config)
    params = {n: _init_array(n, s, rng.child(n), dtype) for n, s in pshapes.items()}
    buffers = {n: _init_array(n, s, rng.child(n), dtype) for n, s in bshapes.items()}
    return Model(config, params, buffers)


# ----------------------------------------------------------------- layers

def patch_embed(image, patch_size: int, weight, bias) -> Tensor:
    """``[..., H, W, c]`` -> ``[..., N, C]``; each patch flattened in (row, col, channel) order."""
    image = T.as_tensor(image)
    H, W, ch = image.shape[-3:]
    P = patch_size
    if H % P or W % P:
        raise ConfigError(f"image {H}x{W} not divisible by patch size {P}")
    lead = image.shape[:-3]
    L = len(lead)
    x = T.reshape(image, lead + (H // P, P, W // P, P, ch))
    x = T.permute(x, list(range(L)) + [L, L + 2, L + 1, L + 3, L + 4])
    x = T.reshape(x, lead + ((H // P) * (W // P), P * P * ch))
    return T.linear(x, weight, bias)


def sinusoid_2d(grid: tuple) -> np.ndarray:
    """Fixed ``[N, 64]`` encoding: 32 features per axis, sin/cos interleaved.

    Angular frequencies run geometrically from 1 down to 1e-4 (wavelengths
    2*pi .. 2*pi*1e4). Row features come first, then column features.
    """
    H, W = grid
    freqs = 10000.0 ** (-np.arange(POS_FREQS) / (POS_FREQS - 1))

    def axis_code(pos):
        ang = pos[:, None] * freqs[None, :]
        out = np.empty((len(pos), 2 * POS_FREQS))
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out

    ys = axis_code(np.arange(H, dtype=np.float64))
    xs = axis_code(np.arange(W, dtype=np.float64))
    enc = np.concatenate([np.repeat(ys, W, axis=0), np.tile(xs, (H, 1))], axis=1)
    return enc


def positional_encoding(grid: tuple, weight, bias=None) -> Tensor:
    """Project the fixed 2-D sinusoid code to the token width with a learned map."""
    weight = T.as_tensor(weight)
    enc = Tensor(sinusoid_2d(grid).astype(weight.dtype))
    return T.linear(enc, weight, bias)


def mlp(x, p) -> Tensor:
    h = T.gelu(T.linear(x, p["mlp.fc1.weight"], p["mlp.fc1.bias"]))
    return T.linear(h, p["mlp.fc2.weight"], p["mlp.fc2.bias"])


def lpi(x, grid: tuple, k1, b1, k2, b2) -> Tensor:
    """Local patch interaction: depthwise 3x3 conv, GELU, depthwise 3x3 conv on the token grid."""
    x = T.as_tensor(x)
    H, W = grid
    lead = x.shape[:-2]
    n, C = x.shape[-2:]
    if H * W != n:
        raise DimensionError(f"lpi: grid {H}x{W} does not cover N={n}")
    y = T.reshape(x, lead + (H, W, C))
    y = T.add(T.depthwise_conv3x3(y, k1), b1)
    y = T.gelu(y)
    y = T.add(T.depthwise_conv3x3(y, k2), b2)
    return T.reshape(y, lead + (n, C))


def attention_params(p: dict, w_proj=None, omega=None) -> AttentionParams:
    return AttentionParams(
        wq=p["attn.wq"], wk=p["attn.wk"], wv=p["attn.wv"], wout=p["attn.wout"], bout=p["attn.bout"],
        w_proj=w_proj, omega=omega if omega is not None else p.get("attn.omega"),
        wq_pool=p.get("attn.wq_pool"), wk_pool=p.get("attn.wk_pool"), tau=p.get("attn.tau"),
    )


def transformer_block(x, p: dict, spec: AttentionSpec, grid: tuple, lpi_enabled: bool = False,
                      w_proj=None) -> Tensor:
    """Pre-norm block: attention, optional LPI, then MLP, each with its own residual.

    ``p`` maps block-local names (``norm1.gamma``, ``attn.wq``, ...) to Tensors.
    """
    x = T.as_tensor(x)
    h = T.layer_norm(x, p["norm1.gamma"], p["norm1.beta"])
    x = T.add(x, multi_head(h, attention_params(p, w_proj), spec, grid))
    if lpi_enabled:
        h = T.layer_norm(x, p["norm_lpi.gamma"], p["norm_lpi.beta"])
        x = T.add(x, lpi(h, grid, p["lpi.conv1.kernel"], p["lpi.conv1.bias"],
                         p["lpi.conv2.kernel"], p["lpi.conv2.bias"]))
    h = T.layer_norm(x, p["norm2.gamma"], p["norm2.beta"])
    return T.add(x, mlp(h, p))


def patch_merge(x, grid: tuple, weight, gamma, beta) -> Tensor:
    """Concatenate 2x2 neighbours (row-major order) to 4C, project, then LayerNorm."""
    x = T.as_tensor(x)
    H, W = grid
    if H % 2 or W % 2:
        raise ConfigError(f"patch_merge: grid {H}x{W} has an odd side")
    lead = x.shape[:-2]
    n, C = x.shape[-2:]
    if H * W != n:
        raise DimensionError(f"patch_merge: grid {H}x{W} does not cover N={n}")
    L = len(lead)
    y = T.reshape(x, lead + (H // 2, 2, W // 2, 2, C))
    y = T.permute(y, list(range(L)) + [L, L + 2, L + 1, L + 3, L + 4])
    y = T.reshape(y, lead + ((H // 2) * (W // 2), 4 * C))
    return T.layer_norm(T.matmul(y, weight), gamma, beta)


def _local(params: dict, prefix: str) -> dict:
    k = len(prefix)
    return {name[k:]: t for name, t in params.items() if name.startswith(prefix)}


def as_tensors(arrays: dict) -> dict:
    return {k: Tensor(v) for k, v in arrays.items()}


def features(model: Model, images, params: Optional[dict] = None, trace: Optional[list] = None) -> Tensor:
    """Pooled final-stage features ``[..., C_last]``. ``trace`` collects per-stage token counts."""
    c = model.config
    params = params if params is not None else as_tensors(model.params)
    buffers = as_tensors(model.buffers)
    images = T.as_tensor(images)
    if images.shape[-3:] != (c.image_size, c.image_size, c.in_chans):
        raise DimensionError(
            f"input image {images.shape[-3:]} does not match configured "
            f"{(c.image_size, c.image_size, c.in_chans)}")
    x = patch_embed(images, c.patch_size, params["patch_embed.weight"], params["patch_embed.bias"])
    grid = c.grids[0]
    x = T.add(x, positional_encoding(grid, params["pos_embed.weight"], params["pos_embed.bias"]))
    layer = 0
    for s, depth in enumerate(c.depths):
        grid = c.grids[s]
        if trace is not None:
            trace.append(x.shape[-2])
        w_proj = params.get(f"stages.{s}.la_proj")
        for b in range(depth):
            pre = f"stages.{s}.blocks.{b}."
            local = _local(params, pre)
            local.update(_local(buffers, pre))
            try:
                x = transformer_block(x, local, c.attention, grid, c.lpi, w_proj)
            except DimensionError as e:
                raise DimensionError(f"layer {layer} (stage {s}, block {b}): {e}") from e
            layer += 1
        if c.structure == "pyramid" and s < len(c.depths) - 1:
            pre = f"stages.{s}.merge."
            x = patch_merge(x, grid, params[pre + "weight"], params[pre + "norm.gamma"],
                            params[pre + "norm.beta"])
    return T.mean(x, axis=-2)


def forward(model: Model, images, params: Optional[dict] = None, trace: Optional[list] = None) -> Tensor:
    """Logits for one image ``[H, W, c]`` or a batch ``[B, H, W, c]``."""
    params = params if params is not None else as_tensors(model.params)
    pooled = features(model, images, params, trace)
    return T.linear(pooled, params["head.weight"], params["head.bias"])
