"""Command-line entry point: verify, train, bench, dump.

Exit codes: 0 success / all suites passed, 1 a check or run failed, 2 usage error.
CSV goes to stdout; the resolved configuration and diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import attn_iso, bench, conv_iso, isocheck, rnn_iso, trainer
from .data2matrix import load_series_csv
from .matcore import write_mtx

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="matrixorder", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="subcommand", required=True)

    v = sub.add_parser("verify", help="run isomorphism suites, CSV report to stdout")
    v.add_argument("--suite", required=True, choices=["conv", "pool", "rnn", "attn", "all"])
    v.add_argument("--trials", type=int, default=200)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--tol", type=float, default=None, help="override every suite's tolerance")
    v.add_argument("--perturb", type=float, default=0.0,
                   help="negative control: add this to one stored value per built matrix")

    t = sub.add_parser("train", help="desk-scale training, CSV report to stdout")
    t.add_argument("--task", required=True, choices=["mnist", "series"])
    t.add_argument("--data-dir", default=None,
                   help="mnist: directory of IDX files; series: CSV file or directory holding series.csv")
    t.add_argument("--subset", type=int, default=2000)
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch", type=int, default=64)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--w", type=int, default=24)
    t.add_argument("--h", type=int, default=1)

    b = sub.add_parser("bench", help="micro-benchmarks, CSV to stdout")
    b.add_argument("--op", required=True, choices=["conv", "rnn", "attn"])
    b.add_argument("--sizes", type=_csv_ints, default=None)
    b.add_argument("--repeats", type=int, default=10)
    b.add_argument("--parallel", action="store_true")

    d = sub.add_parser("dump", help="write a layer matrix in Matrix Market format")
    d.add_argument("--layer", required=True, choices=["conv", "pool", "rnn", "attn"])
    d.add_argument("--out", required=True)
    d.add_argument("--m", type=int, help="image height (conv, pool)")
    d.add_argument("--n", type=int, help="image width (conv, pool)")
    d.add_argument("--r", type=int, default=3, help="kernel size (conv)")
    d.add_argument("--stride", type=int, default=1, help="stride (conv)")
    d.add_argument("--mode", choices=[m.value for m in conv_iso.ConvMode], default="valid2d")
    d.add_argument("--kernel", type=_csv_floats, default=None, help="r*r row-major kernel values (conv)")
    d.add_argument("--p", type=int, help="pool window (pool)")
    d.add_argument("--T", type=int, help="sequence length (rnn)")
    d.add_argument("--d", type=int, help="input dimension (rnn)")
    d.add_argument("--M", type=int, help="hidden size (rnn) or output size (attn)")
    d.add_argument("--N", type=int, help="input length (attn)")
    d.add_argument("--patch", type=int, default=None, help="contiguous patch size (attn)")
    d.add_argument("--seed", type=int, default=0, help="seed for random weights")
    return ap


def _echo(args: argparse.Namespace) -> None:
    print("config: " + json.dumps(vars(args), sort_keys=True, default=str), file=sys.stderr)


def _verify(args) -> int:
    if args.trials < 1:
        raise _Usage("--trials must be >= 1")
    reports = isocheck.run_suites(args.suite, args.trials, args.seed, args.tol, args.perturb)
    sys.stdout.write(isocheck.reports_to_csv(reports))
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


def _train(args) -> int:
    cfg = trainer.TrainConfig(task=args.task, batch=args.batch, lr=args.lr, epochs=args.epochs,
                              seed=args.seed, subset=args.subset, window=args.w, horizon=args.h)
    if args.task == "mnist":
        if args.data_dir is not None:
            cfg.data_dir = args.data_dir
        report = trainer.train_mnist(cfg)
    else:
        if args.data_dir is not None:
            path = Path(args.data_dir)
            cfg.series = load_series_csv(path / "series.csv" if path.is_dir() else path)
        report = trainer.train_series(cfg)
        print(f"persistence baseline mse: {report.baseline_metric!r}", file=sys.stderr)
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def _bench(args) -> int:
    kw = {"repeats": args.repeats}
    if args.sizes:
        kw["sizes"] = args.sizes
    if args.op == "conv":
        results = bench.bench_conv(parallel=args.parallel, **kw)
    elif args.op == "rnn":
        results = bench.bench_rnn(**kw)
    else:
        results = bench.bench_attn(**kw)
    sys.stdout.write(bench.results_to_csv(results))
    return EXIT_OK


class _Usage(Exception):
    pass


def _need(args, *names):
    missing = [f"--{n}" for n in names if getattr(args, n) is None]
    if missing:
        raise _Usage(f"dump --layer {args.layer} requires {' '.join(missing)}")


def _dump(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.layer == "conv":
        _need(args, "m", "n")
        if args.kernel is not None:
            if len(args.kernel) != args.r * args.r:
                raise _Usage(f"--kernel needs {args.r * args.r} values for --r {args.r}")
            k = np.array(args.kernel).reshape(args.r, args.r)
        else:
            k = rng.uniform(-1, 1, (args.r, args.r))
        w = conv_iso.build_wconv(conv_iso.ConvSpec(args.m, args.n, k, args.stride, args.mode))
    elif args.layer == "pool":
        _need(args, "m", "n", "p")
        w = conv_iso.build_wpool(conv_iso.PoolSpec(args.m, args.n, args.p))
    elif args.layer == "rnn":
        _need(args, "T", "d", "M")
        spec = rnn_iso.RnnSpec(args.T, rng.uniform(-0.5, 0.5, (args.M, args.d)),
                               rng.uniform(-0.5, 0.5, (args.M, args.M)))
        w = rnn_iso.build_wrnn(spec)
    else:
        _need(args, "N", "M")
        groups = attn_iso.contiguous_patches(args.N, args.patch or args.N)
        spec = attn_iso.LiftedSpec(rng.uniform(-1, 1, (args.M, args.N)), rng.uniform(-1, 1, (args.N, args.N)),
                                   rng.uniform(-1, 1, (args.M, args.N)), groups)
        w = attn_iso.build_w_sa(spec)
    write_mtx(w, args.out)
    rows, cols = w.shape
    print(f"wrote {args.layer} matrix {rows}x{cols} to {args.out}", file=sys.stderr)
    return EXIT_OK


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    _echo(args)
    handler = {"verify": _verify, "train": _train, "bench": _bench, "dump": _dump}[args.subcommand]
    try:
        return handler(args)
    except _Usage as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, ArithmeticError, AssertionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


def main() -> None:
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr)
    sys.exit(run())


if __name__ == "__main__":
    main()
