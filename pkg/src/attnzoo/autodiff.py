"""Tape-based reverse-mode differentiation and a central-difference gradient checker.

Usage::

    tape = Tape()
    with tape:
        x = tape.watch(Tensor(array))
        loss = ops.sum(ops.mul(x, x))
    grads = backward(tape, loss)
    grads[x.node]          # d loss / d x

Operations in :mod:`attnzoo.tensor` record themselves on the innermost active
tape whenever at least one operand is tracked by it.
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError

_active: contextvars.ContextVar[tuple] = contextvars.ContextVar("attnzoo_tapes", default=())


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple          # node id per operand, None for untracked operands
    output: int
    vjp: Callable          # upstream grad -> tuple of grads, one per operand


class Tape:
    """Ordered record of executed primitives.

    Node ids are handed out monotonically, so the record is already in
    topological order: an id is always produced before it is consumed.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: list[int] = []
        self._leaf_arrays: dict[int, np.ndarray] = {}
        self._next = 0

    def __enter__(self):
        self._token = _active.set(_active.get() + (self,))
        return self

    def __exit__(self, *exc):
        _active.reset(self._token)
        return False

    def _new_id(self) -> int:
        self._next += 1
        return self._next

    def watch(self, t):
        """Mark ``t`` as a leaf of this tape and return it."""
        if t.tape is self:
            return t
        t.tape = self
        t.node = self._new_id()
        self.leaves.append(t.node)
        self._leaf_arrays[t.node] = t.data
        return t

    def record(self, op, inputs, out, vjp):
        ids = tuple(x.node if x.tape is self else None for x in inputs)
        out.tape = self
        out.node = self._new_id()
        self.nodes.append(Node(op, ids, out.node, vjp))
        return out

    def __len__(self):
        return len(self.nodes)


def current_tape() -> Tape | None:
    stack = _active.get()
    return stack[-1] if stack else None


def backward(tape: Tape, loss, keep_all: bool = False) -> dict[int, np.ndarray]:
    """Propagate d(loss)/d(node) through ``tape`` in reverse order.

    Returns a map from leaf node id to gradient (every watched leaf gets an
    entry, zeros if the loss does not depend on it). With ``keep_all`` the
    map also holds gradients of intermediate nodes.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar-valued, got shape {loss.shape}")
    if loss.tape is not tape:
        raise ContractError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    kept: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output, None)
        if g is None:
            continue
        if keep_all:
            kept[node.output] = g
        in_grads = node.vjp(g)
        for nid, gi in zip(node.inputs, in_grads):
            if nid is None or gi is None:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + gi
            else:
                grads[nid] = gi
    out = {}
    for lid in tape.leaves:
        # leaves the loss never reached get zeros
        out[lid] = grads[lid] if lid in grads else np.zeros_like(tape._leaf_arrays[lid])
    if keep_all:
        out.update(kept)
    return out


def value_and_grad(fn: Callable, arrays: Sequence[np.ndarray]):
    """Evaluate ``fn(*tensors)`` on fresh leaves and return (value, grads).

    ``grads`` is a list of arrays aligned with ``arrays``.
    """
    from .tensor import Tensor

    tape = Tape()
    with tape:
        leaves = [tape.watch(Tensor(a)) for a in arrays]
        loss = fn(*leaves)
    g = backward(tape, loss)
    grads = [g.get(t.node, np.zeros_like(t.data)) for t in leaves]
    return float(loss.data.reshape(())), grads


@dataclass
class GradCheckReport:
    op: str
    max_rel_error: float
    mean_rel_error: float
    probes: int
    precision: str

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol

    def as_row(self) -> dict:
        return {
            "op": self.op,
            "max_rel_err": f"{self.max_rel_error:.3e}",
            "mean_rel_err": f"{self.mean_rel_error:.3e}",
            "probes": self.probes,
            "precision": self.precision,
        }


def finite_diff_check(f: Callable, x, h: float = 1e-5, probes: int = 64,
                      rng=None, name: str = "f") -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``x`` is one array or a sequence of arrays; ``f`` receives one Tensor per
    array and must return a scalar Tensor. ``probes`` coordinates are drawn
    without replacement across all inputs (all of them if there are fewer).
    The relative error per probe is ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    from .tensor import Rng, Tensor

    single = isinstance(x, np.ndarray)
    arrays = [np.array(x, dtype=np.float64)] if single else [np.array(a, dtype=np.float64) for a in x]
    if probes < 1:
        raise ContractError("probes must be >= 1")
    rng = rng if rng is not None else Rng(0)

    _, analytic = value_and_grad(f, arrays)
    sizes = [a.size for a in arrays]
    total = sum(sizes)
    n = min(probes, total)
    picks = rng.choice(total, n, replace=False)
    offsets = np.cumsum([0] + sizes)

    def evaluate(arrs):
        val = f(*[Tensor(a) for a in arrs]).data
        if not np.all(np.isfinite(val)):
            raise NumericError(f"{name}: non-finite value during finite differencing")
        return float(val.reshape(()))

    errs = []
    for flat in np.sort(picks):
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(int(flat - offsets[which]), arrays[which].shape)
        orig = arrays[which][idx]
        arrays[which][idx] = orig + h
        fp = evaluate(arrays)
        arrays[which][idx] = orig - h
        fm = evaluate(arrays)
        arrays[which][idx] = orig
        numeric = (fp - fm) / (2 * h)
        a = float(analytic[which][idx])
        errs.append(abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    errs = np.asarray(errs)
    return GradCheckReport(name, float(errs.max()), float(errs.mean()), n, "f64")
