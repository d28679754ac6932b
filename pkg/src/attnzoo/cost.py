"""Analytic parameter and multiply-accumulate census for a ModelConfig.

Counts are derived from the configuration alone, never by running the
network. One MAC is counted per scalar multiply-add in a matmul or
convolution; softmax, normalisation, activations and elementwise products
are free.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

from .attention import AttentionSpec
from .model import POS_HIDDEN, ModelConfig

COMPLEXITY = {
    "sa": "O(N^2 C)",
    "la": "O(N C m)",
    "ea": "O(N C^2)",
    "pa": "O(N C r)",
    "aa": "O(N C)",
    "xca": "O(N C^2)",
    "window": "O(N C w^2)",
}


@dataclass(frozen=True)
class LayerCost:
    layer: str
    params: int
    macs: int


@dataclass
class CostReport:
    config: ModelConfig
    records: list = field(default_factory=list)
    baseline: Optional[str] = None
    flops_ratio: Optional[float] = None

    @property
    def params(self) -> int:
        return sum(r.params for r in self.records)

    @property
    def macs(self) -> int:
        return sum(r.macs for r in self.records)

    @property
    def gmacs(self) -> float:
        return self.macs / 1e9

    @property
    def mparams(self) -> float:
        return self.params / 1e6

    def relative_to(self, baseline: "CostReport", name: str = "baseline") -> "CostReport":
        return CostReport(self.config, list(self.records), name, self.macs / baseline.macs)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "params", "macs"])
        for r in self.records:
            w.writerow([r.layer, r.params, r.macs])
        w.writerow(["total", self.params, self.macs])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max([len(r.layer) for r in self.records] + [5])
        lines = [f"{'layer':<{width}}  {'params':>12}  {'macs':>15}"]
        for r in self.records:
            lines.append(f"{r.layer:<{width}}  {r.params:>12,d}  {r.macs:>15,d}")
        lines.append(f"{'total':<{width}}  {self.params:>12,d}  {self.macs:>15,d}")
        tail = f"params {self.mparams:.2f}M  FLOPs {self.gmacs:.3f}G"
        if self.flops_ratio is not None:
            tail += f"  ratio vs {self.baseline} {self.flops_ratio:.2f}"
        lines.append(tail)
        return "\n".join(lines) + "\n"


def complexity_term(spec: AttentionSpec) -> str:
    return COMPLEXITY[spec.kind]


def attention_core_macs(spec: AttentionSpec, n: int, channels: int, grid: tuple,
                        count_seq_projection: bool = False) -> int:
    """MACs of the token-mixing kernel over all heads (projections excluded)."""
    d = spec.head_dim
    h = channels // d
    C = channels
    kind = spec.kind
    if kind == "sa":
        return 2 * n * n * C
    if kind == "la":
        m = spec.m_for(n)
        macs = 2 * n * m * C
        if count_seq_projection:
            macs += 2 * m * n * C
        return macs
    if kind in ("ea", "xca"):
        return 2 * n * C * d
    if kind == "pa":
        r = spec.features
        return h * (4 * n * d * r + n * r)
    if kind == "aa":
        return 4 * n * C
    w = spec.window_for(grid)
    return 2 * n * w * w * C


def _census(config: ModelConfig, count_seq_projection: bool = False) -> list:
    c = config
    att = c.attention
    P = c.patch_size
    recs = []
    C0, N0 = c.dims[0], c.tokens[0]
    patch_in = c.in_chans * P * P
    recs.append(LayerCost("patch_embed", patch_in * C0 + C0, N0 * patch_in * C0))
    recs.append(LayerCost("pos_embed", POS_HIDDEN * C0 + C0, N0 * POS_HIDDEN * C0))
    last = len(c.dims) - 1
    for s, (C, depth, n, grid) in enumerate(zip(c.dims, c.depths, c.tokens, c.grids)):
        h = C // att.head_dim
        if att.kind == "la":
            recs.append(LayerCost(f"stages.{s}.la_proj", att.m_for(n) * n, 0))
        for b in range(depth):
            p = f"stages.{s}.blocks.{b}."
            recs.append(LayerCost(p + "norm1", 2 * C, 0))
            extra = 0
            if att.kind == "aa":
                extra = 2 * h * att.head_dim
            elif att.kind == "xca" and att.xca_mode == "canonical":
                extra = h
            recs.append(LayerCost(p + "attn", 4 * C * C + C + extra, 4 * n * C * C))
            recs.append(LayerCost(p + "attn_core", 0,
                                  attention_core_macs(att, n, C, grid, count_seq_projection)))
            if c.lpi:
                recs.append(LayerCost(p + "norm_lpi", 2 * C, 0))
                recs.append(LayerCost(p + "lpi", 2 * (9 * C + C), 2 * 9 * n * C))
            recs.append(LayerCost(p + "norm2", 2 * C, 0))
            hid = c.mlp_ratio * C
            recs.append(LayerCost(p + "mlp", C * hid + hid + hid * C + C, 2 * n * C * hid))
        if c.structure == "pyramid" and s < last:
            nxt = c.dims[s + 1]
            recs.append(LayerCost(f"stages.{s}.merge", 4 * C * nxt + 2 * nxt, (n // 4) * 4 * C * nxt))
    K = c.num_classes
    recs.append(LayerCost("head", c.dims[-1] * K + K, c.dims[-1] * K))
    return recs


def count_params(config: ModelConfig) -> CostReport:
    """Exact learnable-parameter census (frozen Performer features excluded)."""
    return CostReport(config, _census(config))


def count_macs(config: ModelConfig, baseline: Optional[ModelConfig] = None,
               baseline_name: str = "baseline", count_seq_projection: bool = False) -> CostReport:
    """MAC census; with ``baseline`` the report also carries the FLOPs ratio.

    ``count_seq_projection`` adds the Linformer token-axis projection of k
    and v, which the reference FLOPs do not include.
    """
    rep = CostReport(config, _census(config, count_seq_projection))
    if baseline is not None:
        base = CostReport(baseline, _census(baseline, count_seq_projection))
        rep = rep.relative_to(base, baseline_name)
    return rep
