"""Command-line entry point.

Subcommands: train, eval, params, bench, gradcheck, overfit. The data
directory comes from --data-dir or the CCT_DATA_DIR environment variable.
"""
from __future__ import annotations

import argparse
import os
import sys

from .bench import (
    bench_attention,
    crossover_warnings,
    param_report,
    write_bench_csv,
    write_param_csv,
)
from .gradcheck import run_full_suite
from .train import evaluate, load_run_config, overfit, train


def _data_dir(args) -> str:
    path = getattr(args, "data_dir", None) or os.environ.get("CCT_DATA_DIR")
    if not path:
        raise SystemExit("no data directory: pass --data-dir or set CCT_DATA_DIR")
    return path


def _int_list(text: str):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, "
                                         f"got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cct",
                                description="Compact convolutional transformer "
                                            "training and analysis tools.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="flat key=value settings file")
    t.add_argument("--data-dir")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--attn", choices=("sdpa", "super"), dest="attn_kind")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data-dir")
    e.add_argument("--split", choices=("train", "test"), default="test")

    pa = sub.add_parser("params", help="parameter count report")
    pa.add_argument("--config", required=True)
    pa.add_argument("--csv", help="also write the report as CSV")

    b = sub.add_parser("bench", help="attention micro-benchmark")
    b.add_argument("--dims", type=_int_list, required=True)
    b.add_argument("--ctx", type=_int_list, required=True)
    b.add_argument("--iters", type=int, default=20)
    b.add_argument("--warmup", type=int, default=5)
    b.add_argument("--out", help="CSV output path (default stdout)")

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--instances", type=int, default=100)

    o = sub.add_parser("overfit", help="small-sample memorization probe")
    o.add_argument("--n", type=int, default=64)
    o.add_argument("--steps", type=int, default=300)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--attn", choices=("sdpa", "super"), default="super")
    o.add_argument("--data-dir")
    return p


def _cmd_train(args) -> int:
    run = load_run_config(args.config, seed=args.seed, attn_kind=args.attn_kind,
                          epochs=args.epochs, batch_size=args.batch_size,
                          augment=False if args.no_augment else None)
    result = train(run, _data_dir(args), args.out_dir,
                   resume_from=args.resume, log=print)
    print(f"done: {result['checkpoint']}")
    print(f"metrics: {result['metrics']}")
    return 0


def _cmd_eval(args) -> int:
    m = evaluate(args.checkpoint, _data_dir(args), args.split)
    print(f"{args.split}: loss {m['loss']:.4f}, top1 {m['top1']:.2f}%, "
          f"top5 {m['top5']:.2f}%")
    return 0


def _cmd_params(args) -> int:
    run = load_run_config(args.config)
    text, rows = param_report(run.model_config())
    print(text)
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            write_param_csv(rows, f)
    return 0


def _cmd_bench(args) -> int:
    rows = bench_attention(args.dims, args.ctx, iters=args.iters,
                           warmup=args.warmup, log=print if args.out else None)
    if args.out:
        with open(args.out, "w", newline="") as f:
            write_bench_csv(rows, f)
    else:
        write_bench_csv(rows, sys.stdout)
    for w in crossover_warnings(rows):
        print(w, file=sys.stderr)
    return 0


def _cmd_gradcheck(args) -> int:
    reports = run_full_suite(instances=args.instances, tol=args.tol)
    failed = [r for r in reports if not r.ok]
    for r in reports:
        status = "ok" if r.ok else "FAIL"
        print(f"{r.op:20s} {status:4s} instances={r.instances} "
              f"max_rel_err={r.max_rel_err:.3e}")
    print(f"{len(reports) - len(failed)}/{len(reports)} ops passed "
          f"at tol {args.tol}")
    return 1 if failed else 0


def _cmd_overfit(args) -> int:
    result = overfit(n=args.n, steps=args.steps, seed=args.seed,
                     attn_kind=args.attn, data_dir=args.data_dir or
                     os.environ.get("CCT_DATA_DIR"), log=print)
    if result["reached"]:
        print(f"reached {result['top1']:.1f}% train top-1 at step "
              f"{result['steps']}")
        return 0
    print(f"did not reach target: final top1 {result['top1']:.1f}%")
    return 1


_COMMANDS = {"train": _cmd_train, "eval": _cmd_eval, "params": _cmd_params,
             "bench": _cmd_bench, "gradcheck": _cmd_gradcheck,
             "overfit": _cmd_overfit}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    raise SystemExit(main())
