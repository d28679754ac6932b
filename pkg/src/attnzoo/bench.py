"""Wall-clock scaling of the attention kernels and log-log slope fitting."""
from __future__ import annotations

import csv
import io
import logging
import math
import os
import time
import warnings
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import attention as A
from . import tensor as T
from .errors import ContractError
from .tensor import Rng, Tensor

log = logging.getLogger(__name__)

LINFORMER_M = 64        # fixed projected length, so cost is linear in N
WINDOW_W = 8
MIN_SAMPLE_S = 2e-3     # each timed sample runs the kernel at least this long


@dataclass(frozen=True)
class BenchRecord:
    variant: str
    N: int
    d: int
    reps: int
    median_s: float
    mad_s: float


def bench_threads() -> int:
    return max(1, int(os.environ.get("ATNZ_THREADS", "1")))


def _grid_for(n: int) -> tuple:
    h = 2 ** (int(math.log2(n)) // 2)
    return h, n // h


def make_kernel(variant: str, n: int, d: int, rng: Rng, dtype=T.F32):
    """Closure running one single-head kernel on fixed random inputs."""
    q, k, v = (Tensor(rng.child(name).normal((n, d), dtype)) for name in "qkv")
    if variant == "sa":
        return lambda: A.sa(q, k, v)
    if variant == "la":
        m = min(LINFORMER_M, n)
        w_proj = Tensor(rng.child("w_proj").normal((m, n), dtype) / np.sqrt(n, dtype=dtype))
        return lambda: A.la(q, k, v, w_proj)
    if variant == "ea":
        return lambda: A.ea(q, k, v)
    if variant == "pa":
        omega = Tensor(T.orthogonal_gaussian(rng.child("omega"), max(1, d // 2), d, dtype))
        return lambda: A.pa(q, k, v, omega)
    if variant == "aa":
        wq, wk = (Tensor(rng.child(s).normal((d,), dtype)) for s in ("wq", "wk"))
        w_out = Tensor(rng.child("w_out").normal((d, d), dtype) / np.sqrt(d, dtype=dtype))
        return lambda: A.aa(q, k, v, wq, wk, w_out)
    if variant == "xca":
        return lambda: A.xca(q, k, v, None, "paper_fixed_tau")
    if variant == "window":
        grid = _grid_for(n)
        w = min(WINDOW_W, *grid)
        return lambda: A.window_sa(q, k, v, w, grid)
    raise ContractError(f"unknown variant {variant!r}")


def _time_samples(fn, inner: int, reps: int) -> np.ndarray:
    out = np.empty(reps)
    for i in range(reps):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        out[i] = (time.perf_counter() - t0) / inner
    return out


def _inner_count(fn) -> int:
    t0 = time.perf_counter()
    fn()
    once = time.perf_counter() - t0
    res = time.get_clock_info("perf_counter").resolution
    if once < 100 * res:
        warnings.warn(f"kernel time {once:.2e}s is near timer resolution {res:.1e}s; batching calls")
    return max(1, math.ceil(MIN_SAMPLE_S / max(once, res)))


def time_callable(fn, reps: int = 7, warmup: int = 2):
    """(median, MAD) seconds per call after ``warmup`` untimed calls."""
    for _ in range(warmup):
        fn()
    inner = _inner_count(fn)
    samples = _time_samples(fn, inner, reps)
    med = float(np.median(samples))
    return med, float(np.median(np.abs(samples - med)))


def sweep(variant: str, n_list, d: int = 32, reps: int = 7, rng=None, warmup: int = 2,
          dtype=T.F32) -> list:
    """Time ``variant`` at each N on seed-determined inputs, single-threaded by default."""
    n_list = [int(n) for n in n_list]
    if reps < 5:
        raise ContractError(f"reps must be >= 5, got {reps}")
    if len(n_list) < 4:
        raise ContractError("need at least 4 sequence lengths")
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ContractError("sequence lengths must be strictly increasing")
    if n_list[-1] < 16 * n_list[0]:
        raise ContractError("sequence lengths must span at least 16x")
    rng = rng if rng is not None else Rng(0)
    records = []
    with threadpool_limits(bench_threads()):
        for n in n_list:
            fn = make_kernel(variant, n, d, rng.child(f"{variant}-{n}"), dtype)
            med, mad = time_callable(fn, reps, warmup)
            records.append(BenchRecord(variant, n, d, reps, med, mad))
    overhead = harness_overhead(reps)
    smallest = min(r.median_s for r in records)
    if overhead >= 0.01 * smallest:
        log.warning("timing overhead %.2e s is >= 1%% of smallest kernel time %.2e s", overhead, smallest)
    return records


def harness_overhead(reps: int = 7) -> float:
    """Median per-call time of an empty kernel through the same timing loop."""
    return time_callable(lambda: None, reps, 1)[0]


def fit_slope(records) -> float:
    """Least-squares slope of log(time) against log(N)."""
    if len(records) < 4:
        raise ContractError("need at least 4 records to fit a slope")
    n = np.array([r.N for r in records], dtype=np.float64)
    t = np.array([r.median_s for r in records], dtype=np.float64)
    if np.any(t <= 0):
        raise ContractError("times must be positive")
    slope, _ = np.polyfit(np.log(n), np.log(t), 1)
    return float(slope)


def records_csv(records, header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(["variant", "N", "d", "reps", "median_s", "mad_s"])
    for r in records:
        w.writerow([r.variant, r.N, r.d, r.reps, f"{r.median_s:.6e}", f"{r.mad_s:.6e}"])
    return buf.getvalue()
