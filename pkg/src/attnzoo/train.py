"""AdamW, warm-up/cosine/cool-down schedule, a stripe-orientation dataset and the training loop."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .autodiff import Tape, backward
from .errors import ConfigError, ContractError, NumericError
from .formats import read_checkpoint, write_checkpoint
from .model import Model, ModelConfig, forward, init_model
from .tensor import Rng, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 31
    batch_size: int = 32
    lr: float = 5e-4
    weight_decay: float = 0.05
    warmup_epochs: int = 2
    cooldown_epochs: int = 1
    min_lr: float = 1e-5
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.warmup_epochs + self.cooldown_epochs >= self.epochs:
            raise ConfigError("warm-up + cool-down must be shorter than the run")


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float, wd: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               no_decay: frozenset = frozenset()):
    """One decoupled-weight-decay Adam update. Returns ``(new_params, new_state)``; inputs are untouched."""
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ContractError(f"{name}: gradient shape {g.shape} vs parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}; step aborted")
    t = state.step + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = dict(params), dict(state.m), dict(state.v)
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        decay = 0.0 if name in no_decay else wd
        upd = (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_p[name] = (p - lr * decay * p - lr * upd).astype(p.dtype, copy=False)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(t, new_m, new_v)


def cosine_schedule(step: int, total: int, warmup: int, cooldown: int, base_lr: float,
                    min_lr: float = 0.0) -> float:
    """Linear warm-up to ``base_lr``, cosine decay to ``min_lr``, then flat ``min_lr``."""
    if not 0 <= step < total:
        raise ContractError(f"step {step} outside [0, {total})")
    if step < warmup:
        return base_lr * step / warmup
    decay = total - warmup - cooldown
    if step >= warmup + decay:
        return min_lr
    progress = (step - warmup) / decay
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


# -------------------------------------------------------------------- data

@dataclass
class SynthDataset:
    images: np.ndarray          # [M, S, S, 3] in [0, 1]
    labels: np.ndarray          # [M] int
    seed: int

    def __len__(self):
        return len(self.labels)

    def split(self, train_fraction: float = 0.8):
        """Deterministic (train, eval) split keyed by the dataset seed."""
        order = Rng(self.seed).child("split").permutation(len(self))
        cut = int(round(train_fraction * len(self)))
        a, b = order[:cut], order[cut:]
        return (SynthDataset(self.images[a], self.labels[a], self.seed),
                SynthDataset(self.images[b], self.labels[b], self.seed))


def generate_synthetic(classes: int = 2, samples: int = 2000, side: int = 32, seed: int = 0,
                       noise: float = 0.1, freq: Optional[float] = None,
                       patch_size: Optional[int] = None) -> SynthDataset:
    """Class 0: horizontal stripes (vary along rows); class 1: vertical stripes.

    Frequency (cycles per image), phase, amplitude and per-channel gain are
    random per sample; Gaussian pixel noise of std ``noise`` is added and the
    result clipped to [0, 1].
    """
    if classes != 2:
        raise ConfigError("the stripe task has exactly two classes")
    if patch_size is not None and side % patch_size:
        raise ConfigError(f"side {side} not divisible by patch size {patch_size}")
    rng = Rng(seed)
    labels = np.arange(samples) % 2
    labels = labels[rng.child("labels").permutation(samples)]
    prng = rng.child("pattern")
    f = np.full(samples, float(freq)) if freq is not None else prng.uniform(samples, 2.0, 6.0)
    phase = prng.uniform(samples, 0.0, 2 * np.pi)
    amp = prng.uniform(samples, 0.25, 0.45)
    gain = prng.uniform((samples, 3), 0.7, 1.0)
    coord = np.arange(side) / side
    wave = np.sin(2 * np.pi * f[:, None] * coord[None, :] + phase[:, None])     # [M, S]
    horiz = np.broadcast_to(wave[:, :, None], (samples, side, side))           # varies with row
    vert = np.broadcast_to(wave[:, None, :], (samples, side, side))            # varies with column
    pattern = np.where(labels[:, None, None] == 0, horiz, vert)
    img = 0.5 + amp[:, None, None, None] * pattern[..., None] * gain[:, None, None, :]
    if noise > 0:
        img = img + noise * rng.child("noise").normal(img.shape)
    return SynthDataset(np.clip(img, 0.0, 1.0).astype(np.float32), labels.astype(np.int64), seed)


def save_dataset(path, data: SynthDataset) -> None:
    """Store a dataset in the checkpoint container as ``images`` and ``labels``."""
    write_checkpoint(path, {"images": data.images, "labels": data.labels.astype(np.float32)})


def load_dataset(path, seed: int = 0) -> SynthDataset:
    arrays = read_checkpoint(path)
    if set(arrays) != {"images", "labels"}:
        raise ConfigError(f"{path}: expected entries 'images' and 'labels', got {sorted(arrays)}")
    return SynthDataset(arrays["images"], arrays["labels"].astype(np.int64), seed)


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class HistoryRow:
    epoch: int
    split: str
    loss: float
    accuracy: float


def history_csv(history: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "split", "loss", "accuracy"])
    for h in history:
        w.writerow([h.epoch, h.split, repr(float(h.loss)), repr(float(h.accuracy))])
    return buf.getvalue()


def _no_decay(params: dict) -> frozenset:
    return frozenset(n for n, a in params.items() if a.ndim < 2)


def loss_and_grads(model: Model, params: dict, images, labels):
    tape = Tape()
    with tape:
        leaves = {n: tape.watch(Tensor(a)) for n, a in params.items()}
        logits = forward(model, images, leaves)
        loss = T.cross_entropy(logits, labels)
    g = backward(tape, loss)
    grads = {n: g[t.node] for n, t in leaves.items()}
    acc = float(np.mean(np.argmax(logits.data, axis=-1) == labels))
    return float(loss.data), acc, grads


def evaluate(model: Model, data: SynthDataset, batch: int = 256, dtype=T.F32):
    total_loss, correct = 0.0, 0
    for i in range(0, len(data), batch):
        x = data.images[i:i + batch].astype(dtype)
        y = data.labels[i:i + batch]
        logits = forward(model, x)
        total_loss += float(T.cross_entropy(logits, y).data) * len(y)
        correct += int(np.sum(np.argmax(logits.data, axis=-1) == y))
    return total_loss / len(data), correct / len(data)


def train(model_config: ModelConfig, train_config: TrainConfig, dataset: SynthDataset,
          dtype=T.F32, model: Optional[Model] = None):
    """Mini-batch AdamW on an 80/20 split. Returns ``(history, trained_model)``."""
    tc = train_config
    model = model if model is not None else init_model(model_config, seed=tc.seed, dtype=dtype)
    params = {k: v.astype(dtype) for k, v in model.params.items()}
    model = Model(model.config, params, {k: v.astype(dtype) for k, v in model.buffers.items()})
    train_set, eval_set = dataset.split()
    n = len(train_set)
    per_epoch = math.ceil(n / tc.batch_size)
    total = tc.epochs * per_epoch
    warm, cool = tc.warmup_epochs * per_epoch, tc.cooldown_epochs * per_epoch
    no_decay = _no_decay(params)
    state = AdamState()
    history = []
    rng = Rng(tc.seed)
    step = 0
    for epoch in range(tc.epochs):
        order = rng.child(f"epoch-{epoch}").permutation(n) if tc.batch_size < n else np.arange(n)
        losses, accs, counts = [], [], []
        for i in range(0, n, tc.batch_size):
            idx = order[i:i + tc.batch_size]
            x = train_set.images[idx].astype(dtype)
            y = train_set.labels[idx]
            lr = cosine_schedule(step, total, warm, cool, tc.lr, min(tc.min_lr, tc.lr))
            try:
                loss, acc, grads = loss_and_grads(model, params, x, y)
                if not math.isfinite(loss):
                    raise NumericError("loss is not finite")
                params, state = adamw_step(params, grads, state, lr, tc.weight_decay,
                                           tc.betas[0], tc.betas[1], tc.eps, no_decay)
            except NumericError as e:
                raise NumericError(f"training diverged at epoch {epoch}, step {step} (lr={lr:.3g}): {e}") from e
            model = Model(model.config, params, model.buffers)
            losses.append(loss)
            accs.append(acc)
            counts.append(len(idx))
            step += 1
        w = np.asarray(counts, dtype=np.float64)
        history.append(HistoryRow(epoch, "train", float(np.dot(losses, w) / w.sum()),
                                  float(np.dot(accs, w) / w.sum())))
        ev_loss, ev_acc = evaluate(model, eval_set, dtype=dtype)
        history.append(HistoryRow(epoch, "eval", ev_loss, ev_acc))
        log.info("epoch %d train_loss %.4f eval_loss %.4f eval_acc %.3f",
                 epoch, history[-2].loss, ev_loss, ev_acc)
    return history, model


def overfit(model_config: ModelConfig, samples: int = 8, steps: int = 200, lr: float = 5e-4,
            seed: int = 0, dtype=T.F32):
    """Full-batch AdamW on a handful of samples; returns the per-step training loss."""
    data = generate_synthetic(2, samples, model_config.image_size, seed)
    model = init_model(model_config, seed=seed, dtype=dtype)
    params = dict(model.params)
    state = AdamState()
    x = data.images.astype(dtype)
    losses = []
    for _ in range(steps):
        loss, _, grads = loss_and_grads(model, params, x, data.labels)
        losses.append(loss)
        params, state = adamw_step(params, grads, state, lr, 0.0)
        model = Model(model.config, params, model.buffers)
    return losses
