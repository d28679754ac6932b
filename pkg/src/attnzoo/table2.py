"""Reference parameter/FLOP table for the 224px comparison and its reproduction.

REFERENCE_VERSION changes whenever a reference value is edited.
"""
from __future__ import annotations

from dataclasses import dataclass

from .cost import count_macs
from .model import ModelConfig, columnar_config, pyramid_config

REFERENCE_VERSION = 1
PARAM_TOL = 0.01
PARAM_TOL_LPI = 0.02
FLOP_TOL = 0.03
RATIO_TOL = 0.02


@dataclass(frozen=True)
class Reference:
    name: str
    params_m: float
    gflops: float
    ratio: float
    top1: float
    baseline: str


REFERENCE = (
    Reference("SA-4", 28.27, 8.821, 1.00, 81.80, "SA-4"),
    Reference("SA-7", 28.28, 1.915, 1.00, 78.97, "SA-7"),
    Reference("LA-4", 30.91, 5.496, 0.62, 79.04, "SA-4"),
    Reference("LA-7", 28.56, 1.561, 0.81, 77.47, "SA-7"),
    Reference("EA-4", 28.27, 4.480, 0.51, 79.87, "SA-4"),
    Reference("EA-7", 28.28, 1.473, 0.77, 77.91, "SA-7"),
    Reference("PA-4", 28.27, 4.481, 0.51, 78.73, "SA-4"),
    Reference("PA-7", 28.28, 1.473, 0.77, 77.87, "SA-7"),
    Reference("AA-4", 28.27, 4.394, 0.50, 77.60, "SA-4"),
    Reference("AA-7", 28.28, 1.445, 0.75, 76.02, "SA-7"),
    Reference("XCA-4", 28.27, 4.480, 0.51, 78.67, "SA-4"),
    Reference("XCA-7", 28.28, 1.473, 0.77, 77.62, "SA-7"),
    Reference("Swin-4", 28.27, 4.528, 0.51, 80.08, "SA-4"),
    Reference("Swin-7", 28.28, 1.500, 0.78, 78.72, "SA-7"),
    Reference("LPI-4", 28.38, 4.520, 0.51, 81.54, "SA-4"),
    Reference("LPI-7", 28.39, 1.486, 0.78, 79.70, "SA-7"),
    Reference("COL-14", 22.00, 6.117, 0.69, 81.30, "SA-4"),
    Reference("COL-16", 22.00, 4.589, 0.52, 80.97, "SA-4"),
)

_KIND = {"SA": "sa", "LA": "la", "EA": "ea", "PA": "pa", "AA": "aa", "XCA": "xca", "Swin": "window"}


def config_for(name: str) -> ModelConfig:
    prefix, patch = name.rsplit("-", 1)
    patch = int(patch)
    if prefix == "COL":
        return columnar_config(patch)
    if prefix == "LPI":
        return pyramid_config("xca", patch, lpi=True)
    return pyramid_config(_KIND[prefix], patch)


@dataclass(frozen=True)
class Comparison:
    ref: Reference
    params_m: float
    gflops: float
    ratio: float

    @property
    def params_dev(self) -> float:
        return self.params_m / self.ref.params_m - 1.0

    @property
    def flops_dev(self) -> float:
        return self.gflops / self.ref.gflops - 1.0

    @property
    def ratio_dev(self) -> float:
        return self.ratio - self.ref.ratio

    @property
    def param_tol(self) -> float:
        return PARAM_TOL_LPI if self.ref.name.startswith("LPI") else PARAM_TOL

    def checks(self) -> dict:
        return {
            "params": abs(self.params_dev) <= self.param_tol,
            "gflops": abs(self.flops_dev) <= FLOP_TOL,
            "ratio": abs(self.ratio_dev) <= RATIO_TOL,
        }


def compare() -> list[Comparison]:
    cache = {}

    def report(name):
        if name not in cache:
            cache[name] = count_macs(config_for(name))
        return cache[name]

    out = []
    for ref in REFERENCE:
        rep = report(ref.name)
        base = report(ref.baseline)
        out.append(Comparison(ref, rep.mparams, rep.gmacs, rep.macs / base.macs))
    return out


def render(rows: list[Comparison]) -> str:
    head = (f"{'model':<8} {'params(M)':>9} {'ref':>6} {'dev':>7} | {'GFLOPs':>7} {'ref':>6} {'dev':>7} | "
            f"{'ratio':>5} {'ref':>5} {'dev':>6} | top-1")
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r.ref.name:<8} {r.params_m:>9.2f} {r.ref.params_m:>6.2f} {r.params_dev:>+7.2%} | "
            f"{r.gflops:>7.3f} {r.ref.gflops:>6.3f} {r.flops_dev:>+7.2%} | "
            f"{r.ratio:>5.2f} {r.ref.ratio:>5.2f} {r.ratio_dev:>+6.3f} | n/a (out of scope)")
    return "\n".join(lines) + "\n"


def to_csv_rows(rows: list[Comparison]) -> list[list]:
    out = [["model", "params_m", "ref_params_m", "params_dev", "gflops", "ref_gflops", "gflops_dev",
            "ratio", "ref_ratio", "ratio_dev", "top1"]]
    for r in rows:
        out.append([r.ref.name, f"{r.params_m:.4f}", r.ref.params_m, f"{r.params_dev:.5f}",
                     f"{r.gflops:.4f}", r.ref.gflops, f"{r.flops_dev:.5f}", f"{r.ratio:.4f}",
                     r.ref.ratio, f"{r.ratio_dev:.4f}", "n/a"])
    return out
