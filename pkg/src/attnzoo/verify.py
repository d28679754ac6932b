"""Oracle-equivalence and gradient-certification suites shared by the CLI and tests."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import attention as A
from . import model as M
from . import oracles
from . import tensor as T
from .autodiff import GradCheckReport, finite_diff_check
from .tensor import Rng, Tensor

ORACLE_TOL = 1e-10
GRAD_TOL = 1e-4
PERFORMER_RS = (8, 32, 128, 512)


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    threshold: float
    passed: bool
    detail: str = ""


def _within(name, value, tol, detail=""):
    return CheckResult(name, float(value), tol, bool(value <= tol), detail)


# ------------------------------------------------------------ instances

def random_instance(kind: str, rng: Rng, n: int, d: int) -> tuple:
    """(kernel args, oracle args) for one random 64-bit instance of ``kind``."""
    q, k, v = (rng.child(s).normal((n, d)) for s in "qkv")
    if kind == "la":
        m = int(rng.child("m").integers(1, n + 1))
        w = rng.child("w").normal((m, n)) / math.sqrt(n)
        return (q, k, v, w), (q, k, v, w)
    if kind == "pa":
        r = int(rng.child("r").integers(1, 2 * d + 1))
        om = T.orthogonal_gaussian(rng.child("omega"), r, d)
        return (q, k, v, om), (q, k, v, om)
    if kind == "aa":
        wq, wk = rng.child("wq").normal((d,)), rng.child("wk").normal((d,))
        wo = rng.child("wo").normal((d, d))
        return (q, k, v, wq, wk, wo), (q, k, v, wq, wk, wo)
    if kind == "xca":
        tau = float(rng.child("tau").uniform((), 0.3, 3.0))
        return (q, k, v, tau, "canonical"), (q, k, v, tau, "canonical")
    if kind == "xca_fixed":
        return (q, k, v, None, "paper_fixed_tau"), (q, k, v, None, "paper_fixed_tau")
    return (q, k, v), (q, k, v)


def _window_instance(rng: Rng):
    side_w = [(1, 1), (2, 1), (2, 2), (4, 1), (4, 2), (4, 4)]
    gh, w = side_w[int(rng.child("shape").integers(0, len(side_w)))]
    gw = w * int(rng.child("cols").integers(1, max(2, 4 // w + 1)))
    d = int(rng.child("d").integers(1, 9))
    q, k, v = (rng.child(s).normal((gh * gw, d)) for s in "qkv")
    return q, k, v, w, (gh, gw)


KERNELS = {
    "sa": A.sa, "la": A.la, "ea": A.ea, "pa": A.pa, "aa": A.aa,
    "xca": A.xca, "xca_fixed": A.xca,
}
ORACLES = {
    "sa": oracles.sa, "la": oracles.la, "ea": oracles.ea, "pa": oracles.pa, "aa": oracles.aa,
    "xca": oracles.xca, "xca_fixed": oracles.xca,
}


def transcription_check(kind: str, instances: int = 100, seed: int = 0,
                        kernel: Optional[Callable] = None) -> CheckResult:
    """Max |kernel - naive oracle| over random instances with N <= 16, d <= 8."""
    rng = Rng(seed).child(f"transcription-{kind}")
    worst = 0.0
    for i in range(instances):
        r = rng.child(str(i))
        if kind == "window":
            q, k, v, w, grid = _window_instance(r)
            got = (kernel or A.window_sa)(q, k, v, w, grid)
            want = oracles.window_sa(q, k, v, w, grid)
        else:
            n = int(r.child("n").integers(1, 17))
            d = int(r.child("d").integers(1, 9))
            args, oargs = random_instance(kind, r, n, d)
            got = (kernel or KERNELS[kind])(*args)
            want = ORACLES[kind](*oargs)
        got = got.data if isinstance(got, Tensor) else np.asarray(got)
        worst = max(worst, float(np.max(np.abs(got - want))))
    return _within(f"transcription/{kind}", worst, ORACLE_TOL, f"{instances} instances")


def la_identity_check(seed: int = 0, trials: int = 20, sa_kernel=A.sa) -> CheckResult:
    rng = Rng(seed).child("la-identity")
    worst = 0.0
    for i in range(trials):
        r = rng.child(str(i))
        n, d = int(r.child("n").integers(1, 17)), int(r.child("d").integers(1, 9))
        q, k, v = (r.child(s).normal((n, d)) for s in "qkv")
        diff = A.la(q, k, v, np.eye(n)).data - sa_kernel(q, k, v).data
        worst = max(worst, float(np.max(np.abs(diff))))
    return _within("equiv/la(m=N,I)==sa", worst, ORACLE_TOL)


def window_identity_check(seed: int = 0, trials: int = 20, sa_kernel=A.sa) -> CheckResult:
    rng = Rng(seed).child("window-identity")
    worst = 0.0
    for i in range(trials):
        r = rng.child(str(i))
        side, d = int(r.child("side").integers(1, 5)), int(r.child("d").integers(1, 9))
        n = side * side
        q, k, v = (r.child(s).normal((n, d)) for s in "qkv")
        diff = A.window_sa(q, k, v, side, (side, side)).data - sa_kernel(q, k, v).data
        worst = max(worst, float(np.max(np.abs(diff))))
    return _within("equiv/window(w=sqrt N)==sa", worst, ORACLE_TOL)


def performer_errors(seed: int = 0, draws: int = 100, rs=PERFORMER_RS, n: int = 16, d: int = 8,
                     sa_kernel=A.sa) -> list:
    """Mean Frobenius error of pa against sa over ``draws`` feature matrices, per r (q = k)."""
    rng = Rng(seed).child("performer")
    q = 0.5 * rng.child("q").normal((n, d))
    v = rng.child("v").normal((n, d))
    exact = sa_kernel(q, q, v).data
    errs = []
    for r in rs:
        total = 0.0
        for j in range(draws):
            om = T.orthogonal_gaussian(rng.child(f"omega-{r}-{j}"), r, d)
            total += float(np.linalg.norm(A.pa(q, q, v, om).data - exact))
        errs.append(total / draws)
    return errs


def performer_convergence_check(seed: int = 0, draws: int = 100, sa_kernel=A.sa) -> CheckResult:
    errs = performer_errors(seed, draws, sa_kernel=sa_kernel)
    increases = max(0.0, max(b - a for a, b in zip(errs, errs[1:])))
    detail = " ".join(f"r={r}:{e:.4g}" for r, e in zip(PERFORMER_RS, errs))
    return CheckResult("equiv/performer-convergence", increases, 0.0, increases <= 0.0, detail)


def corrupted_sa(q, k, v):
    """Deliberately wrong softmax attention (temperature off by 1%) for negative controls."""
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    d = q.shape[-1]
    scores = T.scale(T.matmul(q, T.transpose_last2(k)), 1.01 / math.sqrt(d))
    return T.matmul(T.softmax_last(scores), v)


def equivalence_suite(seed: int = 0, corrupt: bool = False, instances: int = 100) -> list:
    sa_kernel = corrupted_sa if corrupt else A.sa
    results = [
        la_identity_check(seed, sa_kernel=sa_kernel),
        window_identity_check(seed, sa_kernel=sa_kernel),
        performer_convergence_check(seed, sa_kernel=sa_kernel),
    ]
    for kind in ("sa", "la", "ea", "pa", "aa", "xca", "xca_fixed", "window"):
        kernel = sa_kernel if kind == "sa" else None
        results.append(transcription_check(kind, instances, seed, kernel))
    return results


# ------------------------------------------------------------- gradients

def _projection_loss(out, weights):
    return T.mean(T.mul(out, Tensor(weights)))


def kernel_gradcheck(kind: str, seed: int = 0, probes: int = 64, n: int = 6, d: int = 8) -> GradCheckReport:
    """Gradient check of one kernel w.r.t. all its differentiable inputs."""
    rng = Rng(seed).child(f"grad-{kind}")
    q, k, v = (rng.child(s).normal((n, d)) for s in "qkv")
    R = rng.child("R").normal((n, d))
    if kind == "sa":
        return finite_diff_check(lambda q, k, v: _projection_loss(A.sa(q, k, v), R), [q, k, v],
                                 probes=probes, rng=rng, name="sa")
    if kind == "la":
        w = rng.child("w").normal((max(1, n // 2), n)) / math.sqrt(n)
        return finite_diff_check(lambda q, k, v, w: _projection_loss(A.la(q, k, v, w), R),
                                 [q, k, v, w], probes=probes, rng=rng, name="la")
    if kind == "ea":
        return finite_diff_check(lambda q, k, v: _projection_loss(A.ea(q, k, v), R), [q, k, v],
                                 probes=probes, rng=rng, name="ea")
    if kind == "pa":
        om = T.orthogonal_gaussian(rng.child("omega"), max(1, d // 2), d)
        return finite_diff_check(lambda q, k, v: _projection_loss(A.pa(q, k, v, om), R), [q, k, v],
                                 probes=probes, rng=rng, name="pa")
    if kind == "aa":
        wq, wk = rng.child("wq").normal((d,)), rng.child("wk").normal((d,))
        wo = rng.child("wo").normal((d, d)) / math.sqrt(d)
        return finite_diff_check(
            lambda q, k, v, wq, wk, wo: _projection_loss(A.aa(q, k, v, wq, wk, wo), R),
            [q, k, v, wq, wk, wo], probes=probes, rng=rng, name="aa")
    if kind == "xca":
        # both modes in one scalar; tau is a leaf in the canonical mode
        R2 = rng.child("R2").normal((n, d))
        tau = np.array(0.7)

        def f(q, k, v, tau):
            a = _projection_loss(A.xca(q, k, v, tau, "canonical"), R)
            b = _projection_loss(A.xca(q, k, v, None, "paper_fixed_tau"), R2)
            return T.add(a, b)

        return finite_diff_check(f, [q, k, v, tau], probes=probes, rng=rng, name="xca")
    if kind == "window":
        grid, w = (4, 4), 2
        q, k, v = (rng.child("w" + s).normal((16, d)) for s in "qkv")
        R = rng.child("wR").normal((16, d))
        return finite_diff_check(lambda q, k, v: _projection_loss(A.window_sa(q, k, v, w, grid), R),
                                 [q, k, v], probes=probes, rng=rng, name="window")
    raise ValueError(f"unknown kernel {kind!r}")


def _block_inputs(rng: Rng, C: int, lpi: bool, kind: str, head_dim: int, n: int):
    cfg = M.ModelConfig(structure="columnar", patch_size=4, image_size=16, depths=(1,), dims=(C,),
                        attention=A.AttentionSpec(kind=kind, head_dim=head_dim, w=2), lpi=lpi,
                        num_classes=2)
    shapes, buffers = M.param_shapes(cfg)
    prefix = "stages.0.blocks.0."
    names = [k for k in shapes if k.startswith(prefix)]
    arrays = []
    for name in names:
        leaf = name.rsplit(".", 1)[-1]
        shape = shapes[name]
        if leaf == "gamma":
            arr = 1.0 + 0.1 * rng.child(name).normal(shape)
        else:
            arr = 0.3 * rng.child(name).normal(shape)
        arrays.append(arr)
    frozen = {k[len(prefix):]: Tensor(T.orthogonal_gaussian(rng.child(k), *shape))
              for k, shape in buffers.items() if k.startswith(prefix)}
    return cfg, [n[len(prefix):] for n in names], arrays, frozen


def block_gradcheck(seed: int = 0, probes: int = 64, kind: str = "sa", lpi: bool = True) -> GradCheckReport:
    """Transformer block (attention, optional LPI, MLP) w.r.t. its input and every weight."""
    rng = Rng(seed).child(f"grad-block-{kind}")
    C, head_dim, grid = 16, 8, (4, 4)
    cfg, names, arrays, frozen = _block_inputs(rng, C, lpi, kind, head_dim, 16)
    x = rng.child("x").normal((16, C))
    R = rng.child("R").normal((16, C))
    leaves = [x] + arrays
    if kind == "la":
        # the stage-shared sequence projection is a leaf too
        leaves.append(rng.child("w_proj").normal((cfg.attention.m_for(16), 16)) / 4.0)

    def f(x, *ps):
        w_proj = ps[-1] if kind == "la" else None
        p = dict(zip(names, ps), **frozen)
        return _projection_loss(M.transformer_block(x, p, cfg.attention, grid, lpi, w_proj), R)

    return finite_diff_check(f, leaves, probes=probes, rng=rng, name=f"block[{kind}{'+lpi' if lpi else ''}]")


def merge_gradcheck(seed: int = 0, probes: int = 64) -> GradCheckReport:
    rng = Rng(seed).child("grad-merge")
    C, grid = 8, (4, 4)
    x = rng.child("x").normal((16, C))
    w = rng.child("w").normal((4 * C, 2 * C)) / math.sqrt(4 * C)
    g = 1.0 + 0.1 * rng.child("g").normal((2 * C,))
    b = 0.1 * rng.child("b").normal((2 * C,))
    R = rng.child("R").normal((4, 2 * C))
    return finite_diff_check(lambda x, w, g, b: _projection_loss(M.patch_merge(x, grid, w, g, b), R),
                             [x, w, g, b], probes=probes, rng=rng, name="patch_merge")


def lpi_gradcheck(seed: int = 0, probes: int = 64) -> GradCheckReport:
    rng = Rng(seed).child("grad-lpi")
    C, grid = 6, (4, 4)
    x = rng.child("x").normal((16, C))
    k1, k2 = (0.5 * rng.child(s).normal((3, 3, C)) for s in ("k1", "k2"))
    b1, b2 = (0.1 * rng.child(s).normal((C,)) for s in ("b1", "b2"))
    R = rng.child("R").normal((16, C))
    return finite_diff_check(lambda x, k1, b1, k2, b2: _projection_loss(M.lpi(x, grid, k1, b1, k2, b2), R),
                             [x, k1, b1, k2, b2], probes=probes, rng=rng, name="lpi")


GRADCHECK_IMAGE = 64


def model_gradcheck(kind: str, seed: int = 0, probes: int = 64, lpi: bool = False) -> GradCheckReport:
    """End-to-end tiny pyramid model w.r.t. all learnable parameters (64-bit)."""
    cfg = M.tiny_config(kind, image_size=GRADCHECK_IMAGE, lpi=lpi, seed=seed)
    model = M.init_model(cfg, dtype=T.F64)
    rng = Rng(seed).child(f"grad-model-{kind}")
    # fresh fan-in scaled weights: the training init leaves gradients near roundoff,
    # and larger weights saturate GELU units with the same effect
    names = list(model.params)
    arrays = []
    for n in names:
        a = model.params[n]
        leaf = n.rsplit(".", 1)[-1]
        if leaf == "tau":
            arrays.append(a)
        elif leaf == "gamma":
            arrays.append(a + 0.1 * rng.child(n).normal(a.shape))
        elif a.ndim == 1:
            arrays.append(0.1 * rng.child(n).normal(a.shape))
        else:
            fan_in = int(np.prod(a.shape[:-1]))
            arrays.append(rng.child(n).normal(a.shape) / math.sqrt(fan_in))
    image = rng.child("image").uniform((2, GRADCHECK_IMAGE, GRADCHECK_IMAGE, 3))
    R = rng.child("R").normal((2, cfg.num_classes))

    def f(*ps):
        logits = M.forward(model, image, dict(zip(names, ps)))
        return _projection_loss(logits, R)

    return finite_diff_check(f, arrays, probes=probes, rng=rng,
                             name=f"model[{kind}{'+lpi' if lpi else ''}]")


def gradcheck_suite(seed: int = 0, probes: int = 64, kinds=A.KINDS, include_model: bool = True) -> list:
    reports = [kernel_gradcheck(k, seed, probes) for k in kinds]
    reports.extend(block_gradcheck(seed, probes, k, lpi=(k == "xca")) for k in kinds)
    reports.append(merge_gradcheck(seed, probes))
    reports.append(lpi_gradcheck(seed, probes))
    if include_model:
        reports.extend(model_gradcheck(k, seed, probes) for k in kinds)
        reports.append(model_gradcheck("xca", seed, probes, lpi=True))
    return reports
