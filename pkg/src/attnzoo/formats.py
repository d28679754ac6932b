"""Checkpoint container and the key-value run configuration format.

Checkpoint layout (all integers little-endian)::

    b"ATNZ" | version u32 | entry count u32
    per entry: name length u16 | name (utf-8) | rank u8 | extents u32 * rank | float32 data

Config files hold one ``key = value`` per line; ``#`` starts a comment.
Lists are comma separated. Keys::

    structure, patch_size, image_size, attention.kind, attention.m_ratio,
    attention.r, attention.w, attention.head_dim, attention.xca_mode,
    lpi, dims, depths, num_classes, seed,
    train.epochs, train.batch_size, train.lr, train.weight_decay,
    train.warmup_epochs, train.cooldown_epochs, train.samples
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .attention import AttentionSpec
from .errors import ConfigError
from .model import ModelConfig, tiny_config

MAGIC = b"ATNZ"
VERSION = 1


def write_checkpoint(path, arrays: dict) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not an ATNZ checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape).copy()
        off += 4 * size
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return out


# ------------------------------------------------------------------ config

_MODEL_KEYS = {"structure", "patch_size", "image_size", "lpi", "dims", "depths", "num_classes", "seed"}
_ATT_KEYS = {"kind", "m_ratio", "r", "w", "head_dim", "xca_mode", "m"}
_TRAIN_KEYS = {"epochs", "batch_size", "lr", "weight_decay", "warmup_epochs", "cooldown_epochs",
               "samples", "min_lr"}


def _parse_value(key: str, raw: str):
    if key in ("dims", "depths"):
        try:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        except ValueError as e:
            raise ConfigError(f"{key}: expected comma-separated integers, got {raw!r}") from e
    if key == "lpi":
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"lpi: expected a boolean, got {raw!r}")
    if key in ("structure", "attention.kind", "attention.xca_mode"):
        return raw
    try:
        num = float(raw)
    except ValueError as e:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from e
    if key in ("attention.m_ratio", "train.lr", "train.weight_decay", "train.min_lr"):
        return num
    if num != int(num):
        raise ConfigError(f"{key}: expected an integer, got {raw!r}")
    return int(num)


def parse_config_text(text: str) -> dict:
    """Parse key-value text into a flat dict, rejecting unknown keys and duplicates."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        section, _, leaf = key.rpartition(".")
        known = (key in _MODEL_KEYS or (section == "attention" and leaf in _ATT_KEYS)
                 or (section == "train" and leaf in _TRAIN_KEYS))
        if not known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = _parse_value(key, raw.strip().strip('"'))
    return out


def config_from_dict(flat: dict) -> tuple[ModelConfig, dict]:
    """Build a ModelConfig; returns it with the ``train.*`` entries (prefix stripped)."""
    att = {k.split(".", 1)[1]: v for k, v in flat.items() if k.startswith("attention.")}
    model = {k: v for k, v in flat.items() if k in _MODEL_KEYS}
    train = {k.split(".", 1)[1]: v for k, v in flat.items() if k.startswith("train.")}
    try:
        spec = AttentionSpec(**att)
        cfg = ModelConfig(attention=spec, **model)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    return cfg, train


PRESETS = {f"tiny_{k}": k for k in ("sa", "la", "ea", "pa", "aa", "xca", "window")}
PRESETS["tiny_lpi"] = "lpi"


def load_config(source: str) -> tuple[ModelConfig, dict]:
    """Load a config file, or a built-in preset name such as ``tiny_sa``."""
    if source in PRESETS:
        kind = PRESETS[source]
        if kind == "lpi":
            return tiny_config("xca", lpi=True), {}
        return tiny_config(kind), {}
    p = Path(source)
    if not p.is_file():
        raise ConfigError(f"config {source!r} is neither a file nor a preset ({', '.join(PRESETS)})")
    return config_from_dict(parse_config_text(p.read_text()))


def format_config(cfg: ModelConfig) -> str:
    a = cfg.attention
    lines = [
        f"structure = {cfg.structure}",
        f"patch_size = {cfg.patch_size}",
        f"image_size = {cfg.image_size}",
        f"attention.kind = {a.kind}",
        f"attention.m_ratio = {a.m_ratio}",
        f"attention.w = {a.w}",
        f"attention.head_dim = {a.head_dim}",
        f"attention.xca_mode = {a.xca_mode}",
        f"lpi = {str(cfg.lpi).lower()}",
        f"dims = {','.join(map(str, cfg.dims))}",
        f"depths = {','.join(map(str, cfg.depths))}",
        f"num_classes = {cfg.num_classes}",
        f"seed = {cfg.seed}",
    ]
    if a.r is not None:
        lines.insert(5, f"attention.r = {a.r}")
    if a.m is not None:
        lines.insert(5, f"attention.m = {a.m}")
    return "\n".join(lines) + "\n"
