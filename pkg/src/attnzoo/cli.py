"""``attnzoo`` command line: count, equiv, gradcheck, bench, train, table2.

Every subcommand prints ``RESULT pass=<k> fail=<j>`` as its last line and exits
0 only when every check passed. Primary output goes to stdout (or ``--out``),
as an aligned table by default or CSV with ``--csv``.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from . import attention as A
from . import bench as B
from . import cost
from . import table2 as T2
from . import tensor as T
from . import train as TR
from . import verify as V
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .formats import load_config, write_checkpoint
from .tensor import Rng

SA_MIN_SLOPE = 1.7
LINEAR_MAX_SLOPE = 1.3


class Outcome:
    """Collects primary output rows and pass/fail counts for one subcommand."""

    def __init__(self, header):
        self.header = list(header)
        self.rows = []
        self.notes = []
        self.passed = 0
        self.failed = 0

    def add(self, row, ok=None):
        self.rows.append([str(x) for x in row])
        if ok is not None:
            self.check(ok)

    def check(self, ok: bool):
        if ok:
            self.passed += 1
        else:
            self.failed += 1

    def render(self, as_csv: bool) -> str:
        if as_csv:
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(self.header)
            w.writerows(self.rows)
            return buf.getvalue()
        widths = [max(len(h), *(len(r[i]) for r in self.rows)) if self.rows else len(h)
                  for i, h in enumerate(self.header)]
        lines = ["  ".join(h.ljust(w) for h, w in zip(self.header, widths)).rstrip()]
        lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in self.rows]
        lines += self.notes
        return "\n".join(lines) + "\n"


def parse_ns(text: str) -> list:
    """``256..4096`` (doubling) or a comma list ``256,512,1024``."""
    try:
        if ".." in text:
            lo, hi = (int(s) for s in text.split("..", 1))
            if lo < 1 or hi < lo:
                raise ValueError
            out = [lo]
            while out[-1] * 2 <= hi:
                out.append(out[-1] * 2)
            return out
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--Ns: expected 'LO..HI' or a comma list of integers, got {text!r}") from None


def parse_variants(text: str) -> list:
    names = [s.strip() for s in text.split(",") if s.strip()]
    bad = [n for n in names if n not in A.KINDS]
    if bad or not names:
        raise ConfigError(f"--variants: unknown {bad or text!r}; choose from {','.join(A.KINDS)}")
    return names


def _dtype(args, default):
    return {"f32": T.F32, "f64": T.F64}[args.precision or default]


# ------------------------------------------------------------ subcommands

def cmd_count(args, loaded) -> Outcome:
    cfg = loaded[0] if loaded else load_config("tiny_sa")[0]
    report = cost.count_macs(cfg)
    out = Outcome(["layer", "params", "macs"])
    for r in report.records:
        out.add([r.layer, r.params, r.macs])
    out.add(["total", report.params, report.macs], ok=True)
    out.notes.append(f"# {report.mparams:.4f}M params, {report.gmacs:.4f} GFLOPs (1 MAC = 1 FLOP), "
                     f"attention {cfg.attention.kind} {cost.complexity_term(cfg.attention)}")
    return out


def cmd_equiv(args, loaded) -> Outcome:
    out = Outcome(["check", "value", "threshold", "passed", "detail"])
    for r in V.equivalence_suite(args.seed, corrupt=args.corrupt_sa):
        out.add([r.name, f"{r.value:.3e}", f"{r.threshold:.0e}", r.passed, r.detail], ok=r.passed)
    return out


def cmd_gradcheck(args, loaded) -> Outcome:
    if (args.precision or "f64") != "f64":
        raise ConfigError("gradcheck runs in 64-bit only; use --precision f64")
    kinds = parse_variants(args.variants) if args.variants else list(A.KINDS)
    out = Outcome(["op", "max_rel_err", "mean_rel_err", "probes", "precision", "passed"])
    reports = [V.kernel_gradcheck(k, args.seed, args.probes) for k in kinds]
    if not args.kernels_only:
        reports += [V.block_gradcheck(args.seed, args.probes, k, lpi=(k == "xca")) for k in kinds]
        reports += [V.merge_gradcheck(args.seed, args.probes),
                    V.lpi_gradcheck(args.seed, args.probes)]
        reports += [V.model_gradcheck(k, args.seed, args.probes) for k in kinds]
    for rep in reports:
        ok = rep.passed(V.GRAD_TOL)
        out.add([rep.op, f"{rep.max_rel_error:.3e}", f"{rep.mean_rel_error:.3e}", rep.probes,
                 rep.precision, ok], ok=ok)
    return out


def cmd_bench(args, loaded) -> Outcome:
    kinds = parse_variants(args.variants) if args.variants else list(A.KINDS)
    ns = parse_ns(args.Ns)
    dtype = _dtype(args, "f32")
    out = Outcome(["variant", "N", "d", "reps", "median_s", "mad_s"])
    rng = Rng(args.seed)
    for kind in kinds:
        records = B.sweep(kind, ns, d=args.d, reps=args.reps, rng=rng.child(kind), dtype=dtype)
        for r in records:
            out.add([r.variant, r.N, r.d, r.reps, f"{r.median_s:.6e}", f"{r.mad_s:.6e}"])
        slope = B.fit_slope(records)
        if kind == "sa":
            ok, rule = slope >= SA_MIN_SLOPE, f">= {SA_MIN_SLOPE}"
        else:
            ok, rule = slope <= LINEAR_MAX_SLOPE, f"<= {LINEAR_MAX_SLOPE}"
        out.check(ok)
        out.notes.append(f"# slope {kind} {slope:.3f} (need {rule}) {'ok' if ok else 'FAIL'}")
    return out


def cmd_train(args, loaded) -> Outcome:
    model_cfg, extra = loaded if loaded else load_config("tiny_sa")
    extra = dict(extra)
    samples = int(extra.pop("samples", 2000))
    if args.epochs is not None:
        extra["epochs"] = args.epochs
    seed = args.seed
    model_cfg = dataclasses.replace(model_cfg, seed=seed)
    try:
        tc = TR.TrainConfig(seed=seed, **extra)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    data = TR.generate_synthetic(2, samples, model_cfg.image_size, seed, patch_size=model_cfg.patch_size)
    history, model = TR.train(model_cfg, tc, data, dtype=_dtype(args, "f32"))
    out = Outcome(["epoch", "split", "loss", "accuracy"])
    for h in history:
        out.add([h.epoch, h.split, repr(float(h.loss)), repr(float(h.accuracy))])
    final = history[-1].accuracy
    ok = final > args.min_accuracy
    out.check(ok)
    out.notes.append(f"# final eval accuracy {final:.4f} (need > {args.min_accuracy}) {'ok' if ok else 'FAIL'}")
    if args.checkpoint:
        write_checkpoint(args.checkpoint, model.params)
    return out


def cmd_table2(args, loaded) -> Outcome:
    rows = T2.compare()
    out = Outcome(["model", "params_M", "ref_params_M", "params_dev", "gflops", "ref_gflops",
                   "flops_dev", "ratio", "ref_ratio", "top1", "passed"])
    for c in rows:
        checks = c.checks()
        ok = all(checks.values())
        out.add([c.ref.name, f"{c.params_m:.2f}", f"{c.ref.params_m:.2f}", f"{100 * c.params_dev:+.2f}%",
                 f"{c.gflops:.3f}", f"{c.ref.gflops:.3f}", f"{100 * c.flops_dev:+.2f}%",
                 f"{c.ratio:.2f}", f"{c.ref.ratio:.2f}", "n/a (out of scope)", ok])
        for ok_cell in checks.values():
            out.check(ok_cell)
    return out


COMMANDS = {
    "count": cmd_count, "equiv": cmd_equiv, "gradcheck": cmd_gradcheck,
    "bench": cmd_bench, "train": cmd_train, "table2": cmd_table2,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file or preset name (tiny_sa ... tiny_window, tiny_lpi)")
    common.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")
    common.add_argument("--csv", action="store_true", help="emit CSV instead of an aligned table")
    common.add_argument("--out", help="write the primary output here instead of stdout")
    common.add_argument("--precision", choices=("f32", "f64"), help="floating-point precision")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="attnzoo", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"attnzoo {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}")

    sub.add_parser("count", parents=[common], help="per-layer parameter and MAC counts")
    e = sub.add_parser("equiv", parents=[common], help="oracle-equivalence suite")
    e.add_argument("--corrupt-sa", action="store_true",
                   help="self-test: replace softmax attention with a perturbed kernel (suite must fail)")
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient certification")
    g.add_argument("--variants", help="comma list of attention kinds (default all)")
    g.add_argument("--probes", type=int, default=64)
    g.add_argument("--kernels-only", action="store_true", help="skip block, merge, LPI and model checks")
    b = sub.add_parser("bench", parents=[common], help="runtime scaling sweep and slope check")
    b.add_argument("--variants", help="comma list of attention kinds (default all)")
    b.add_argument("--Ns", default="256..4096", help="'LO..HI' doubling range or comma list")
    b.add_argument("--d", type=int, default=32)
    b.add_argument("--reps", type=int, default=7)
    t = sub.add_parser("train", parents=[common], help="train a model on the synthetic stripe task")
    t.add_argument("--epochs", type=int, help="override train.epochs")
    t.add_argument("--checkpoint", help="write trained parameters to this path")
    t.add_argument("--min-accuracy", type=float, default=0.9, help="pass threshold on final eval accuracy")
    sub.add_parser("table2", parents=[common], help="reproduce the reference cost table")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        loaded = load_config(args.config) if args.config else None
        if args.command == "bench":
            outcome = COMMANDS[args.command](args, loaded)
        else:
            with threadpool_limits(1):
                outcome = COMMANDS[args.command](args, loaded)
    except (ConfigError, ContractError, DimensionError, NumericError) as e:
        print(f"attnzoo {args.command}: error: {e}", file=sys.stderr)
        print("RESULT pass=0 fail=1")
        return 2
    text = outcome.render(args.csv)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    print(f"RESULT pass={outcome.passed} fail={outcome.failed}")
    return 0 if outcome.failed == 0 else 1


if __name__ == "__main__":
    sys.exit(main())
