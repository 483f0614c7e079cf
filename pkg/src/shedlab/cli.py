"""Command-line entry point (``shedlab`` / ``python -m shedlab``)."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .blocks import build_partition
from .config import format_config, parse_config
from .data import blob_split, write_idx_pair
from .formats import read_snapshot, read_weights, write_snapshot, write_weights
from .harness import SUMMARY_HEADER, TrainingDiverged, momentum_sweep, run_experiment, sweep_summary
from .trace import read_trace, write_trace


def _momenta(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def _mu_tag(mu: float) -> str:
    return format(mu, "g")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shedlab", description="Pruning experiments and shedding analysis.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--out", required=True, type=Path)

    sweep = sub.add_parser("sweep", help="run one experiment per momentum value")
    sweep.add_argument("--config", required=True, type=Path)
    sweep.add_argument("--momenta", required=True, type=_momenta)
    sweep.add_argument("--out", required=True, type=Path)

    an = sub.add_parser("analyze", help="analyze run outputs").add_subparsers(dest="what", required=True)
    a_iou = an.add_parser("iou", help="IoU of two kept sets")
    a_iou.add_argument("--a", required=True, type=Path)
    a_iou.add_argument("--b", required=True, type=Path)
    a_tr = an.add_parser("trace", help="shed attribution of a trace")
    a_tr.add_argument("--in", dest="path", required=True, type=Path)
    a_tr.add_argument("--fit-exp", action="store_true", help="fit an exponential to the actual keep-ratio")
    a_pmf = an.add_parser("blockpmf", help="L0 distribution of kept blocks")
    a_pmf.add_argument("--weights", required=True, type=Path)
    a_pmf.add_argument("--snapshot", required=True, type=Path)
    a_pmf.add_argument("--cutoff", type=float, default=analysis.DEGENERATE_CUTOFF)

    ds = sub.add_parser("dataset", help="dataset utilities").add_subparsers(dest="what", required=True)
    synth = ds.add_parser("synth", help="write a synthetic blob dataset as IDX files")
    synth.add_argument("--seed", required=True, type=int)
    synth.add_argument("--out", required=True, type=Path)
    synth.add_argument("--classes", type=int, default=10)
    synth.add_argument("--samples", type=int, default=4096)
    synth.add_argument("--eval-samples", type=int, default=1024)
    synth.add_argument("--height", type=int, default=8)
    synth.add_argument("--width", type=int, default=8)
    synth.add_argument("--noise", type=float, default=1.0)
    return p


def _write_run(result, out: Path, tag: str = ""):
    write_trace(result.trace, out / f"trace{tag}.csv")
    write_snapshot(result.snapshot, out / f"mask{tag}.snap")
    write_weights(result.weights, out / f"weights{tag}.bin")


def cmd_run(args):
    cfg = parse_config(args.config)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.resolved").write_text(format_config(cfg))
    try:
        result = run_experiment(cfg)
    except TrainingDiverged as exc:
        write_trace(exc.trace, args.out / "trace.csv")
        raise
    _write_run(result, args.out)
    a = analysis.shed_attribution(result.trace)
    print(f"rows={len(result.trace)} explicit={a.explicit_total} shed={a.shed_total} "
          f"cascade_ratio={a.cascade_ratio:.6g}")


def cmd_sweep(args):
    cfg = parse_config(args.config)
    if len(args.momenta) < 2:
        raise ValueError("--momenta needs at least two values")
    args.out.mkdir(parents=True, exist_ok=True)
    results = momentum_sweep(cfg, args.momenta)
    lines = [",".join(SUMMARY_HEADER)]
    for (mu, keep, explicit, shed, ratio, ev), result in zip(sweep_summary(results), results.values()):
        _write_run(result, args.out, f"_mu{_mu_tag(mu)}")
        ev = "" if ev is None else format(ev, ".17g")
        lines.append(f"{_mu_tag(mu)},{keep:.17g},{explicit},{shed},{ratio:.17g},{ev}")
        print(f"momentum={_mu_tag(mu)} explicit={explicit} shed={shed} cascade_ratio={ratio:.6g}")
    (args.out / "sweep_summary.csv").write_text("\n".join(lines) + "\n")


def cmd_analyze(args):
    if args.what == "iou":
        print(f"{analysis.iou(read_snapshot(args.a), read_snapshot(args.b)):.17g}")
    elif args.what == "trace":
        trace = read_trace(args.path)
        a = analysis.shed_attribution(trace)
        print(f"rows={len(trace)} explicit={a.explicit_total} shed={a.shed_total} "
              f"cascade_ratio={a.cascade_ratio:.17g}")
        if args.fit_exp:
            fit = analysis.fit_exponential(trace)
            print(f"tau={fit.tau:.17g} asymptote={fit.asymptote:.17g} initial={fit.initial:.17g} "
                  f"r_squared={fit.r_squared:.17g} residual_norm={fit.residual_norm:.17g}")
    else:
        snap = read_snapshot(args.snapshot)
        if snap.granularity != "block":
            raise ValueError("blockpmf needs a block-granularity snapshot")
        weights = read_weights(args.weights)
        missing = [n for n in snap.masks if n not in weights]
        if missing:
            raise ValueError(f"weight file lacks tensors {missing}")
        part = build_partition({n: weights[n].shape for n in snap.masks})
        for name, a, b in part.tensor_blocks:
            if snap.masks[name].size != b - a:
                raise ValueError(f"{name}: snapshot has {snap.masks[name].size} blocks, weights imply {b - a}")
        flat = np.concatenate([weights[n].ravel() for n in snap.masks]).astype(np.float64)
        kept = np.concatenate(list(snap.masks.values()))
        pmf = analysis.kept_block_l0_pmf(flat, kept, part, args.cutoff)
        print("l0,probability")
        for l0, p in enumerate(pmf):
            print(f"{l0},{p:.17g}")


def cmd_dataset(args):
    train, held_out = blob_split(args.classes, (args.height, args.width), args.samples, args.eval_samples,
                                 args.noise, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    write_idx_pair(train, args.out / "train-images-idx3-ubyte", args.out / "train-labels-idx1-ubyte",
                   args.height, args.width)
    write_idx_pair(held_out, args.out / "eval-images-idx3-ubyte", args.out / "eval-labels-idx1-ubyte",
                   args.height, args.width)
    print(f"wrote {len(train)} train and {len(held_out)} eval samples to {args.out}")


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "analyze": cmd_analyze, "dataset": cmd_dataset}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"shedlab: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
