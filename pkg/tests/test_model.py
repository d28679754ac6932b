import itertools

import numpy as np
import pytest

from attnzoo import attention as A
from attnzoo import model as M
from attnzoo import oracles
from attnzoo import tensor as T
from attnzoo.attention import AttentionSpec
from attnzoo.errors import ConfigError, DimensionError
from attnzoo.tensor import Rng, Tensor


def test_patch_embed_token_counts(rng):
    for P, n in ((4, 3136), (16, 196)):
        C = 8
        x = M.patch_embed(np.zeros((224, 224, 3)), P, np.zeros((3 * P * P, C)), np.zeros(C))
        assert x.shape == (n, C)


def test_patch_embed_identity_weight_flattens(rng):
    img = rng.normal((8, 8, 3))
    P = 2
    out = M.patch_embed(img, P, np.eye(3 * P * P), np.zeros(3 * P * P)).data
    # token (1, 2) is the patch at rows 2..3, cols 4..5
    assert np.array_equal(out[1 * 4 + 2], img[2:4, 4:6].reshape(-1))


def test_patch_embed_indivisible_is_config_error():
    with pytest.raises(ConfigError):
        M.patch_embed(np.zeros((10, 10, 3)), 4, np.zeros((48, 4)), np.zeros(4))


def test_sinusoid_range_and_distinct_56():
    enc = M.sinusoid_2d((56, 56))
    assert enc.shape == (3136, 64)
    assert enc.min() >= -1 and enc.max() <= 1
    assert len(np.unique(enc.round(12), axis=0)) == 3136


def test_sinusoid_layout():
    enc = M.sinusoid_2d((3, 5))
    # row block first; position 0 gives sin=0, cos=1
    assert np.array_equal(enc[0, 0:4], [0.0, 1.0, 0.0, 1.0])
    assert np.allclose(enc[5, 0:2], [np.sin(1.0), np.cos(1.0)], rtol=0, atol=1e-15)
    assert np.allclose(enc[1, 32:34], [np.sin(1.0), np.cos(1.0)], rtol=0, atol=1e-15)
    assert np.isclose(enc[5, 30], np.sin(1e-4), rtol=1e-12)


def test_positional_zero_projection_contributes_nothing():
    assert np.array_equal(M.positional_encoding((4, 4), np.zeros((64, 8)), np.zeros(8)).data, np.zeros((16, 8)))


def _block_params(rng, C, kind, lpi, head_dim, zero=False):
    cfg = M.ModelConfig(structure="columnar", patch_size=4, image_size=16, depths=(1,), dims=(C,),
                        attention=AttentionSpec(kind=kind, head_dim=head_dim, w=2), lpi=lpi, num_classes=2)
    shapes, buffers = M.param_shapes(cfg)
    pre = "stages.0.blocks.0."
    p = {}
    for name, shape in {**shapes, **buffers}.items():
        if not name.startswith(pre):
            continue
        leaf = name[len(pre):]
        if leaf.endswith("gamma") or leaf == "attn.tau":
            arr = np.ones(shape)
        elif leaf == "attn.omega":
            arr = T.orthogonal_gaussian(rng.child(name), *shape)
        elif zero:
            arr = np.zeros(shape)
        else:
            arr = 0.3 * rng.child(name).normal(shape)
        p[leaf] = Tensor(arr)
    return cfg, p


@pytest.mark.parametrize("kind", [k for k in A.KINDS if k != "aa"])
def test_zero_block_is_identity(kind, rng):
    cfg, p = _block_params(rng, 8, kind, True, 4, zero=True)
    w_proj = Tensor(np.zeros((4, 16))) if kind == "la" else None
    x = rng.normal((16, 8))
    out = M.transformer_block(x, p, cfg.attention, (4, 4), True, w_proj).data
    assert np.array_equal(out, x)


def test_zero_block_aa_keeps_query_residual(rng):
    # additive attention returns q itself inside the kernel, so zero weights still give the identity
    cfg, p = _block_params(rng, 8, "aa", False, 4, zero=True)
    x = rng.normal((16, 8))
    assert np.array_equal(M.transformer_block(x, p, cfg.attention, (4, 4)).data, x)


@pytest.mark.parametrize("kind,lpi", list(itertools.product(A.KINDS, (False, True))))
def test_block_preserves_shape(kind, lpi, rng):
    cfg, p = _block_params(rng, 8, kind, lpi, 4)
    w_proj = Tensor(rng.normal((4, 16))) if kind == "la" else None
    x = rng.normal((2, 16, 8))
    assert M.transformer_block(x, p, cfg.attention, (4, 4), lpi, w_proj).shape == x.shape


def _ln(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + T.LN_EPS) * g + b


def _gelu(x):
    from scipy.special import erf
    return 0.5 * x * (1 + erf(x / np.sqrt(2)))


def test_block_vs_composition_oracle(rng):
    C, hd = 8, 4
    cfg, p = _block_params(rng, C, "sa", False, hd)
    a = {k: v.data for k, v in p.items()}
    x = rng.normal((6, C))
    h = _ln(x, a["norm1.gamma"], a["norm1.beta"])
    q, k, v = h @ a["attn.wq"], h @ a["attn.wk"], h @ a["attn.wv"]
    heads = np.concatenate([oracles.sa(q[:, i:i + hd], k[:, i:i + hd], v[:, i:i + hd]) for i in (0, hd)], 1)
    x1 = x + heads @ a["attn.wout"] + a["attn.bout"]
    h2 = _ln(x1, a["norm2.gamma"], a["norm2.beta"])
    want = x1 + _gelu(h2 @ a["mlp.fc1.weight"] + a["mlp.fc1.bias"]) @ a["mlp.fc2.weight"] + a["mlp.fc2.bias"]
    got = M.transformer_block(x, p, cfg.attention, None).data
    assert np.max(np.abs(got - want)) < 1e-10


def test_patch_merge_shapes():
    x = np.zeros((3136, 96))
    out = M.patch_merge(x, (56, 56), np.zeros((384, 192)), np.ones(192), np.zeros(192))
    assert out.shape == (784, 192)


def test_patch_merge_selector(rng):
    C = 3
    x = rng.normal((16, C))
    w = np.zeros((4 * C, 4 * C))
    w[:C, :C] = np.eye(C)
    # LN afterwards; compare pre-norm values via an explicit oracle instead
    grid = (4, 4)
    y = M.patch_merge(x, grid, w, np.ones(4 * C), np.zeros(4 * C)).data
    top_left = x.reshape(4, 4, C)[0::2, 0::2].reshape(4, C)
    pre = np.concatenate([top_left, np.zeros((4, 3 * C))], axis=1)
    assert np.max(np.abs(y - _ln(pre, 1.0, 0.0))) < 1e-12


def test_patch_merge_vs_oracle(rng):
    C, H, W = 5, 4, 6
    x = rng.normal((H * W, C))
    w, g, b = rng.normal((4 * C, 2 * C)), rng.normal((2 * C,)), rng.normal((2 * C,))
    grid = x.reshape(H, W, C)
    rows = []
    for i in range(0, H, 2):
        for j in range(0, W, 2):
            rows.append(np.concatenate([grid[i, j], grid[i, j + 1], grid[i + 1, j], grid[i + 1, j + 1]]))
    want = _ln(np.array(rows) @ w, g, b)
    assert np.max(np.abs(M.patch_merge(x, (H, W), w, g, b).data - want)) < 1e-10


def test_patch_merge_odd_grid():
    with pytest.raises(ConfigError):
        M.patch_merge(np.zeros((9, 2)), (3, 3), np.zeros((8, 4)), np.ones(4), np.zeros(4))


def test_lpi_delta_kernels_identity(rng):
    C = 4
    x = rng.normal((16, C))
    delta = np.zeros((3, 3, C))
    delta[1, 1] = 1
    # GELU sits between the convs, so the identity is checked on the second conv only
    out = M.lpi(x, (4, 4), delta, np.zeros(C), delta, np.zeros(C)).data
    assert np.max(np.abs(out - _gelu(x))) < 1e-15


def test_lpi_constant_field_interior(rng):
    C = 2
    x = np.full((36, C), 0.7)
    k1, k2 = rng.normal((3, 3, C)), rng.normal((3, 3, C))
    out = M.lpi(x, (6, 6), k1, np.zeros(C), k2, np.zeros(C)).data.reshape(6, 6, C)
    interior = out[2:4, 2:4]
    assert np.max(np.abs(interior - interior[0, 0])) < 1e-12


def test_lpi_vs_sliding_oracle(rng):
    C = 3
    x = rng.normal((64, C))
    k1, k2, b1, b2 = rng.normal((3, 3, C)), rng.normal((3, 3, C)), rng.normal((C,)), rng.normal((C,))

    def conv(z, k):
        H, W, _ = z.shape
        pad = np.pad(z, ((1, 1), (1, 1), (0, 0)))
        out = np.zeros_like(z)
        for i in range(H):
            for j in range(W):
                out[i, j] = np.sum(pad[i:i + 3, j:j + 3] * k, axis=(0, 1))
        return out

    z = x.reshape(8, 8, C)
    want = conv(_gelu(conv(z, k1) + b1), k2) + b2
    assert np.max(np.abs(M.lpi(x, (8, 8), k1, b1, k2, b2).data - want.reshape(64, C))) < 1e-10


def test_pyramid_token_counts():
    assert M.pyramid_config("sa", 4).tokens == [3136, 784, 196, 49]
    assert M.pyramid_config("sa", 7).tokens == [1024, 256, 64, 16]
    assert M.pyramid_config("sa", 4).heads == [3, 6, 12, 24]
    assert M.columnar_config(16).tokens == [196]


def test_config_invariants():
    with pytest.raises(ConfigError):
        M.ModelConfig(structure="pyramid", patch_size=4, image_size=30)
    with pytest.raises(ConfigError):
        M.tiny_config("sa", image_size=28)   # 7x7 grid cannot merge
    with pytest.raises(ConfigError):
        M.ModelConfig(structure="tower", patch_size=4)


def test_default_logits_shape():
    cfg = M.pyramid_config("ea", 7)
    model = M.init_model(cfg, seed=0)
    assert model.num_params() > 28_000_000
    trace = []
    logits = M.forward(model, np.zeros((224, 224, 3), np.float32), trace=trace)
    assert logits.shape == (1000,)
    assert trace == [1024, 256, 64, 16]


@pytest.mark.parametrize("kind", A.KINDS)
def test_tiny_forward_deterministic(kind):
    cfg = M.tiny_config(kind)
    img = Rng(3).uniform((2, 32, 32, 3))
    a = M.forward(M.init_model(cfg, seed=5, dtype=T.F64), img).data
    b = M.forward(M.init_model(cfg, seed=5, dtype=T.F64), img).data
    assert a.shape == (2, 2) and np.array_equal(a, b)


def test_zero_residual_branches_make_identity_until_head(rng):
    cfg = M.tiny_config("sa", lpi=True)
    model = M.init_model(cfg, seed=0, dtype=T.F64)
    params = dict(model.params)
    for name in params:
        if ".blocks." in name and not name.endswith("gamma"):
            params[name] = np.zeros_like(params[name])
    img = rng.uniform((32, 32, 3))
    P = M.as_tensors(params)
    x = M.patch_embed(img, 4, P["patch_embed.weight"], P["patch_embed.bias"])
    x = T.add(x, M.positional_encoding((8, 8), P["pos_embed.weight"], P["pos_embed.bias"]))
    for s in range(3):
        g = cfg.grids[s]
        x = M.patch_merge(x, g, P[f"stages.{s}.merge.weight"], P[f"stages.{s}.merge.norm.gamma"],
                          P[f"stages.{s}.merge.norm.beta"])
    want = T.mean(x, axis=-2).data
    got = M.features(model, img, P).data
    assert np.max(np.abs(got - want)) < 1e-12


def test_shape_error_names_layer():
    cfg = M.tiny_config("sa")
    model = M.init_model(cfg, seed=0)
    bad = dict(M.as_tensors(model.params))
    bad["stages.1.blocks.0.attn.wq"] = Tensor(np.zeros((31, 32), np.float32))
    with pytest.raises(DimensionError, match="layer 1"):
        M.forward(model, np.zeros((32, 32, 3), np.float32), bad)


def test_wrong_image_size():
    model = M.init_model(M.tiny_config("sa"), seed=0)
    with pytest.raises(DimensionError):
        M.forward(model, np.zeros((16, 16, 3), np.float32))


def test_init_statistics():
    model = M.init_model(M.pyramid_config("sa", 4), seed=0)
    w = model.params["stages.2.blocks.3.mlp.fc1.weight"]
    assert abs(w.std() - 0.02 * 0.8796) < 0.001      # trunc at 2 sigma shrinks the std
    assert np.all(np.abs(w) <= 0.04)
    assert np.array_equal(model.params["stages.0.blocks.0.norm1.gamma"], np.ones(96))
    assert np.array_equal(model.params["head.bias"], np.zeros(1000))


def test_performer_features_are_buffers():
    model = M.init_model(M.tiny_config("pa"), seed=0)
    assert not any("omega" in n for n in model.params)
    om = model.buffers["stages.0.blocks.0.attn.omega"]
    assert om.shape == (8, 16)
    again = M.init_model(M.tiny_config("pa"), seed=0).buffers["stages.0.blocks.0.attn.omega"]
    assert np.array_equal(om, again)
