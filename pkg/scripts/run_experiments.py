"""Run every verification suite, both training surrogates and the benchmarks.

Writes one CSV per experiment into ``--out`` and prints a short summary.

    python scripts/run_experiments.py --mnist-dir data/mnist --out results
"""
from __future__ import annotations

import argparse
import time
from pathlib import Path

import numpy as np

from matrixorder import bench, isocheck
from matrixorder.trainer import TrainConfig, train_mnist, train_series


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--mnist-dir", default="data/mnist")
    ap.add_argument("--out", default="results")
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--skip-bench", action="store_true")
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    reports = isocheck.run_suites("all", seed=0)
    (out / "verify.csv").write_text(isocheck.reports_to_csv(reports))
    for r in reports:
        print(f"verify {r.suite:12s} max err {r.max_abs_err:.2e}  tol {r.tolerance:.0e}  "
              f"{'ok' if r.passed else 'FAILED'}")

    runs = {}
    for backend in ("matrix", "oracle"):
        t0 = time.perf_counter()
        cfg = TrainConfig(data_dir=args.mnist_dir, subset=2000, epochs=10, seed=args.seed, backend=backend)
        runs[backend] = train_mnist(cfg)
        (out / f"mnist_{backend}.csv").write_text(runs[backend].to_csv())
        print(f"mnist {backend:6s} accuracy {runs[backend].final_metric:.3f} "
              f"({time.perf_counter() - t0:.1f}s)")
    div = np.max(np.abs(np.subtract(runs["matrix"].step_losses, runs["oracle"].step_losses)))
    print(f"mnist matrix vs oracle max step-loss divergence {div:.1e}")

    series = train_series(TrainConfig(task="series", epochs=50, seed=0))
    (out / "series.csv").write_text(series.to_csv())
    gain = 1.0 - min(series.eval_metrics) / series.baseline_metric
    print(f"series best mse {min(series.eval_metrics):.4f} vs persistence "
          f"{series.baseline_metric:.4f} ({100 * gain:.1f}% better)")

    if not args.skip_bench:
        results = bench.bench_conv() + bench.bench_rnn() + bench.bench_attn()
        (out / "bench.csv").write_text(bench.results_to_csv(results))
        for r in results:
            print(f"bench {r.op:20s} {r.size:16s} {r.median_ns:>10d} ns")


if __name__ == "__main__":
    main()
