import struct

import numpy as np
import pytest

from attnzoo import model as M
from attnzoo import train as TR
from attnzoo.errors import ConfigError
from attnzoo.formats import (format_config, load_config, parse_config_text, read_checkpoint,
                             write_checkpoint, config_from_dict)


def test_checkpoint_byte_layout(tmp_path):
    path = tmp_path / "one.atnz"
    write_checkpoint(path, {"w": np.array([[1.0, 2.0, 3.0]], np.float32)})
    raw = path.read_bytes()
    want = (b"ATNZ" + struct.pack("<II", 1, 1) + struct.pack("<H", 1) + b"w" + struct.pack("<B", 2)
            + struct.pack("<2I", 1, 3) + np.array([1, 2, 3], "<f4").tobytes())
    assert raw == want


def test_checkpoint_roundtrip_model(tmp_path):
    model = M.init_model(M.tiny_config("la", lpi=True), seed=3)
    path = tmp_path / "m.atnz"
    write_checkpoint(path, model.params)
    back = read_checkpoint(path)
    assert list(back) == list(model.params)
    for k in back:
        assert np.array_equal(back[k], model.params[k])
    # scalars in checkpoint == parameter census
    from attnzoo.cost import count_params
    assert sum(a.size for a in back.values()) == count_params(model.config).params


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(ValueError):
        read_checkpoint(p)
    write_checkpoint(p, {"a": np.zeros(2)})
    p.write_bytes(p.read_bytes() + b"\x00")
    with pytest.raises(ValueError, match="trailing"):
        read_checkpoint(p)


def test_dataset_persistence(tmp_path):
    ds = TR.generate_synthetic(samples=10, seed=4)
    TR.save_dataset(tmp_path / "d.atnz", ds)
    back = TR.load_dataset(tmp_path / "d.atnz", seed=4)
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)


CONFIG = """
# tiny linformer run
structure = pyramid
patch_size = 4
image_size = 32
attention.kind = la
attention.m_ratio = 0.5
attention.head_dim = 16
lpi = true
dims = 16, 32, 64, 128
depths = 1,1,1,1
num_classes = 2
seed = 9
train.epochs = 5
train.lr = 1e-3
"""


def test_parse_config_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(CONFIG)
    cfg, train = load_config(str(p))
    assert cfg.attention.kind == "la" and cfg.attention.m_ratio == 0.5
    assert cfg.dims == (16, 32, 64, 128) and cfg.lpi and cfg.seed == 9
    assert train == {"epochs": 5, "lr": 1e-3}


def test_format_roundtrip():
    cfg = M.tiny_config("pa", r=4)
    back, _ = config_from_dict(parse_config_text(format_config(cfg)))
    assert back == cfg


@pytest.mark.parametrize("text", [
    "colour = red",
    "dims = 1, x",
    "lpi = maybe",
    "patch_size = 4.5",
    "patch_size = 4\npatch_size = 7",
    "just words",
    "attention.kind = flash",
    "structure = pyramid\npatch_size = 5",
])
def test_bad_configs_rejected(text):
    with pytest.raises(ConfigError):
        config_from_dict(parse_config_text(text))


def test_presets_and_missing():
    cfg, _ = load_config("tiny_window")
    assert cfg.attention.kind == "window"
    assert load_config("tiny_lpi")[0].lpi
    with pytest.raises(ConfigError):
        load_config("/nonexistent/file.cfg")
