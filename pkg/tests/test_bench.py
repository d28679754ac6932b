import numpy as np
import pytest

from attnzoo import attention as A
from attnzoo import bench as B
from attnzoo.errors import ContractError
from attnzoo.tensor import Rng


def _records(times, ns=(256, 512, 1024, 2048, 4096)):
    return [B.BenchRecord("x", n, 32, 5, t, 0.0) for n, t in zip(ns, times)]


def test_slope_exact_power_laws():
    ns = np.array([256, 512, 1024, 2048, 4096], dtype=float)
    assert abs(B.fit_slope(_records(3e-9 * ns ** 2)) - 2.0) < 1e-6
    assert abs(B.fit_slope(_records(7e-7 * ns)) - 1.0) < 1e-6


def test_slope_contracts():
    with pytest.raises(ContractError):
        B.fit_slope(_records([1.0, 2.0, 3.0]))
    with pytest.raises(ContractError):
        B.fit_slope(_records([1.0, 2.0, 0.0, 4.0]))


@pytest.mark.parametrize("kw", [
    dict(n_list=[256, 512, 1024, 4096], reps=1),
    dict(n_list=[256, 512, 1024], reps=5),
    dict(n_list=[256, 1024, 512, 4096], reps=5),
    dict(n_list=[256, 300, 400, 500], reps=5),
])
def test_sweep_preconditions(kw):
    with pytest.raises(ContractError):
        B.sweep("sa", **kw)


def test_unknown_variant():
    with pytest.raises(ContractError):
        B.make_kernel("flash", 64, 8, Rng(0))


@pytest.mark.parametrize("variant", A.KINDS)
def test_kernels_run_at_bench_shapes(variant):
    out = B.make_kernel(variant, 128, 32, Rng(0))()
    assert out.shape == (128, 32)


def test_window_grid_covers_n():
    for n in (256, 512, 1024, 2048, 4096):
        h, w = B._grid_for(n)
        assert h * w == n and h <= w


def test_small_sweep_records():
    recs = B.sweep("ea", [32, 64, 128, 256, 512], d=8, reps=5)
    assert [r.N for r in recs] == [32, 64, 128, 256, 512]
    assert all(r.median_s > 0 and r.mad_s >= 0 and r.reps == 5 for r in recs)
    text = B.records_csv(recs)
    assert text.splitlines()[0] == "variant,N,d,reps,median_s,mad_s"
    assert len(text.splitlines()) == 6


def test_harness_overhead_below_one_percent():
    smallest = B.time_callable(B.make_kernel("aa", 256, 32, Rng(0)), reps=5)[0]
    assert B.harness_overhead(5) < 0.01 * smallest


def test_inputs_deterministic_per_seed():
    a = B.make_kernel("sa", 64, 8, Rng(3))().data
    b = B.make_kernel("sa", 64, 8, Rng(3))().data
    assert np.array_equal(a, b)
