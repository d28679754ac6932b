import math

import numpy as np
import pytest

from attnzoo import model as M
from attnzoo import tensor as T
from attnzoo import train as TR
from attnzoo.errors import ConfigError, ContractError, NumericError
from attnzoo.tensor import Rng, Tensor


def test_adamw_zero_grad_no_decay_is_identity(rng):
    p = {"w": rng.normal((3, 3)), "b": rng.normal((3,))}
    g = {k: np.zeros_like(v) for k, v in p.items()}
    new, state = TR.adamw_step(p, g, TR.AdamState(), lr=0.1, wd=0.0)
    for k in p:
        assert np.array_equal(new[k], p[k])
    assert state.step == 1


def test_adamw_degenerate_moments():
    p, g, lr, eps = {"x": np.array(1.5)}, {"x": np.array(-0.3)}, 0.01, 1e-8
    new, _ = TR.adamw_step(p, g, TR.AdamState(), lr, 0.0, beta1=0.0, beta2=0.0, eps=eps)
    assert abs(new["x"] - (1.5 - lr * -0.3 / (0.3 + eps))) < 1e-15


def test_adamw_ten_steps_vs_hand_oracle():
    lr, wd, b1, b2, eps = 0.05, 0.01, 0.9, 0.999, 1e-8
    p = {"p": np.array(1.0)}
    state = TR.AdamState()
    x, m, v = 1.0, 0.0, 0.0
    for t in range(1, 11):
        g = 2.0 * p["p"]
        p, state = TR.adamw_step(p, {"p": g}, state, lr, wd, b1, b2, eps)
        gx = 2.0 * x
        m = b1 * m + (1 - b1) * gx
        v = b2 * v + (1 - b2) * gx * gx
        x = x - lr * wd * x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    assert abs(float(p["p"]) - x) < 1e-10


def test_adamw_is_pure_and_skips_decay(rng):
    p = {"w": rng.normal((2, 2)), "b": rng.normal((2,))}
    g = {"w": np.zeros((2, 2)), "b": np.zeros(2)}
    before = {k: v.copy() for k, v in p.items()}
    new, _ = TR.adamw_step(p, g, TR.AdamState(), lr=0.1, wd=0.5, no_decay=frozenset({"b"}))
    assert all(np.array_equal(p[k], before[k]) for k in p)
    assert np.array_equal(new["b"], p["b"])
    assert np.allclose(new["w"], p["w"] * (1 - 0.05))


def test_adamw_non_finite_names_layer():
    with pytest.raises(NumericError, match="stages.2.attn"):
        TR.adamw_step({"stages.2.attn": np.ones(2)}, {"stages.2.attn": np.array([1.0, np.nan])},
                      TR.AdamState(), 0.1, 0.0)


def test_adamw_shape_mismatch():
    with pytest.raises(ContractError):
        TR.adamw_step({"a": np.ones(2)}, {"a": np.ones(3)}, TR.AdamState(), 0.1, 0.0)


def test_schedule_points():
    total, warm, cool, base = 100, 10, 5, 0.5
    assert TR.cosine_schedule(0, total, warm, cool, base) == 0.0
    assert TR.cosine_schedule(1, total, warm, cool, base) == base / warm
    assert TR.cosine_schedule(warm, total, warm, cool, base) == base
    step = 40
    progress = (step - warm) / (total - warm - cool)
    want = 0.5 * (1 + math.cos(math.pi * progress)) * base
    assert abs(TR.cosine_schedule(step, total, warm, cool, base) - want) < 1e-12
    assert TR.cosine_schedule(total - 1, total, warm, cool, base, min_lr=1e-5) == 1e-5
    with pytest.raises(ContractError):
        TR.cosine_schedule(total, total, warm, cool, base)


def test_train_config_invariants():
    with pytest.raises(ConfigError):
        TR.TrainConfig(epochs=3, warmup_epochs=2, cooldown_epochs=1)
    with pytest.raises(ConfigError):
        TR.TrainConfig(batch_size=0)


def test_dataset_balance_range_determinism():
    ds = TR.generate_synthetic(samples=100, seed=1)
    assert np.sum(ds.labels == 0) == 50
    assert ds.images.min() >= 0 and ds.images.max() <= 1 and ds.images.shape == (100, 32, 32, 3)
    again = TR.generate_synthetic(samples=100, seed=1)
    assert np.array_equal(ds.images, again.images) and np.array_equal(ds.labels, again.labels)
    odd = TR.generate_synthetic(samples=101, seed=1)
    assert abs(np.sum(odd.labels == 0) - np.sum(odd.labels == 1)) <= 1


def test_dataset_patch_divisibility():
    with pytest.raises(ConfigError):
        TR.generate_synthetic(samples=4, side=30, patch_size=4)


def test_clean_stripes_separated_by_conv_probe():
    ds = TR.generate_synthetic(samples=200, seed=2, noise=0.0, freq=3.0)
    dy = np.zeros((3, 3, 3))
    dy[0, 1], dy[2, 1] = -1, 1                      # derivative along rows
    dx = np.transpose(dy, (1, 0, 2))                # derivative along columns
    ey = np.array([np.sum(T.depthwise_conv3x3(x, dy).data[1:-1, 1:-1] ** 2) for x in ds.images])
    ex = np.array([np.sum(T.depthwise_conv3x3(x, dx).data[1:-1, 1:-1] ** 2) for x in ds.images])
    pred = (ex > ey).astype(int)                    # column variation means vertical stripes (class 1)
    assert np.array_equal(pred, ds.labels)


def test_split_is_deterministic():
    ds = TR.generate_synthetic(samples=50, seed=3)
    a, b = ds.split()
    assert len(a) == 40 and len(b) == 10
    a2, _ = ds.split()
    assert np.array_equal(a.labels, a2.labels)


def _tiny_run(lr, epochs=3, seed=0, dtype=T.F64):
    ds = TR.generate_synthetic(samples=40, seed=seed)
    tc = TR.TrainConfig(epochs=epochs, batch_size=32, lr=lr, warmup_epochs=1, cooldown_epochs=1, seed=seed)
    return TR.train(M.tiny_config("ea"), tc, ds, dtype=dtype)


def test_zero_lr_freezes_model():
    ds = TR.generate_synthetic(samples=40, seed=0)
    tc = TR.TrainConfig(epochs=3, batch_size=64, lr=0.0, weight_decay=0.05, warmup_epochs=1, cooldown_epochs=1)
    init = M.init_model(M.tiny_config("sa"), seed=0, dtype=T.F64)
    hist, model = TR.train(M.tiny_config("sa"), tc, ds, dtype=T.F64, model=init)
    for k in init.params:
        assert np.array_equal(init.params[k], model.params[k])
    losses = [h.loss for h in hist if h.split == "train"]
    assert len(set(losses)) == 1


def test_training_is_bit_reproducible():
    h1, m1 = _tiny_run(1e-3)
    h2, m2 = _tiny_run(1e-3)
    assert TR.history_csv(h1) == TR.history_csv(h2)
    assert all(np.array_equal(m1.params[k], m2.params[k]) for k in m1.params)


def test_history_csv_header():
    hist, _ = _tiny_run(1e-3, epochs=3)
    lines = TR.history_csv(hist).splitlines()
    assert lines[0] == "epoch,split,loss,accuracy"
    assert len(lines) == 1 + 2 * 3


def test_small_step_descends():
    cfg = M.tiny_config("xca")
    model = M.init_model(cfg, seed=0, dtype=T.F64)
    ds = TR.generate_synthetic(samples=16, seed=0)
    x = ds.images.astype(np.float64)
    loss0, _, grads = TR.loss_and_grads(model, model.params, x, ds.labels)
    new, _ = TR.adamw_step(model.params, grads, TR.AdamState(), 1e-5, 0.0)
    loss1, _, _ = TR.loss_and_grads(model, new, x, ds.labels)
    assert loss1 <= loss0


def test_nan_loss_aborts_with_context():
    cfg = M.tiny_config("sa")
    model = M.init_model(cfg, seed=0)
    params = dict(model.params)
    params["head.bias"] = np.array([np.inf, 0.0], np.float32)
    broken = M.Model(cfg, params, model.buffers)
    ds = TR.generate_synthetic(samples=20, seed=0)
    tc = TR.TrainConfig(epochs=3, warmup_epochs=1, cooldown_epochs=1)
    with pytest.raises(NumericError, match="epoch 0"):
        TR.train(cfg, tc, ds, model=broken)


def test_overfit_eight_samples_sa():
    losses = TR.overfit(M.tiny_config("sa"), steps=200)
    assert min(losses) < 0.1
