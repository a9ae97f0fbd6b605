"""Micro-benchmarks: structured kernels vs densified products vs direct oracles.

No timing is recorded until every compared implementation agrees on the
benchmark input within ``AGREE_TOL``.
"""
from __future__ import annotations

import csv
import io
import os
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import attn_iso, conv_iso, rnn_iso
from .matcore import OpCounter, banded_matvec, block_lt_matvec, densify, lifted_apply

AGREE_TOL = 1e-12
RESULT_FIELDS = ("op", "size", "repeats", "median_ns", "ops_per_sec")


class BenchMismatchError(AssertionError):
    """Compared implementations disagree; timings would be meaningless."""


@dataclass(frozen=True)
class BenchResult:
    op: str
    size: str
    repeats: int
    median_ns: int
    ops_per_sec: float


def _time(fn: Callable[[], object], repeats: int, warmup: int = 1) -> int:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return int(np.median(samples))


def _gate(outputs: dict[str, np.ndarray], size: str) -> None:
    names = list(outputs)
    ref = outputs[names[0]]
    for name in names[1:]:
        err = float(np.max(np.abs(outputs[name] - ref)))
        if err > AGREE_TOL:
            raise BenchMismatchError(f"{name} differs from {names[0]} by {err:.3g} at {size}")


def _run(cases: dict[str, Callable[[], np.ndarray]], size: str, repeats: int) -> list[BenchResult]:
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    _gate({k: np.asarray(f()).ravel() for k, f in cases.items()}, size)
    out = []
    for name, fn in cases.items():
        ns = max(_time(fn, repeats), 1)
        out.append(BenchResult(name, size, repeats, ns, 1e9 / ns))
    return out


def bench_conv(sizes: Sequence[int] = (16, 28, 64), repeats: int = 10, kernel_size: int = 3,
               parallel: bool = False, seed: int = 0) -> list[BenchResult]:
    """Square images of side ``size`` with an r x r kernel, valid placements, stride 1."""
    rng = np.random.default_rng(seed)
    results = []
    for n in sizes:
        img = rng.uniform(-1, 1, (n, n))
        k = rng.uniform(-1, 1, (kernel_size, kernel_size))
        w = conv_iso.build_wconv(conv_iso.ConvSpec(n, n, k))
        counter = OpCounter()
        banded_matvec(w, img.ravel(), counter=counter)
        if counter.madds != w.rows * kernel_size ** 2:
            raise AssertionError(f"banded work {counter.madds} != P*r^2 = {w.rows * kernel_size ** 2}")
        dense = densify(w)
        x = img.ravel()
        cases = {
            "conv_banded": lambda: banded_matvec(w, x),
            "conv_dense": lambda: dense @ x,
            "conv_oracle": lambda: conv_iso.oracle_conv2d(img, k),
        }
        if parallel:
            workers = os.cpu_count() or 2
            cases["conv_banded_parallel"] = lambda: banded_matvec(w, x, workers=workers)
        results += _run(cases, f"{n}x{n}/r{kernel_size}", repeats)
    return results


def bench_rnn(sizes: Sequence[int] = (8, 32, 64), repeats: int = 10, dim: int = 8,
              seed: int = 0) -> list[BenchResult]:
    """Sequences of length ``size`` with d = M = ``dim``."""
    rng = np.random.default_rng(seed)
    results = []
    for t in sizes:
        spec = rnn_iso.RnnSpec(t, rng.uniform(-0.5, 0.5, (dim, dim)),
                               rng.uniform(-0.5, 0.5, (dim, dim)) / np.sqrt(dim))
        xs = rng.uniform(-1, 1, (t, dim))
        w = rnn_iso.build_wrnn(spec)
        counter = OpCounter()
        block_lt_matvec(w, xs.ravel(), counter=counter)
        if counter.madds != t * (t + 1) // 2 * dim * dim:
            raise AssertionError(f"block work {counter.madds} != T(T+1)/2*M*d")
        dense = densify(w)
        x = xs.ravel()
        cases = {
            "rnn_block": lambda: block_lt_matvec(w, x),
            "rnn_dense": lambda: dense @ x,
            "rnn_oracle": lambda: rnn_iso.oracle_rnn(spec, xs),
        }
        results += _run(cases, f"T{t}/d{dim}/M{dim}", repeats)
    return results


def bench_attn(sizes: Sequence[int] = (8, 16, 32), repeats: int = 10, patch: int = 4,
               seed: int = 0) -> list[BenchResult]:
    """Lifted attention with N = M = ``size`` and contiguous patches."""
    rng = np.random.default_rng(seed)
    results = []
    for n in sizes:
        groups = attn_iso.contiguous_patches(n, patch)
        spec = attn_iso.LiftedSpec(rng.uniform(-1, 1, (n, n)), rng.uniform(-1, 1, (n, n)),
                                   rng.uniform(-1, 1, (n, n)), groups)
        x = rng.uniform(-1, 1, n)
        w = attn_iso.build_w_sa(spec)
        counter = OpCounter()
        lifted_apply(w, x, counter=counter)
        if counter.madds != attn_iso.patch_entry_count(n, groups):
            raise AssertionError("lifted work does not match M * sum(|patch|^2)")
        dense = densify(w)
        size = f"N{n}/M{n}/patch{patch}"
        _gate({"oracle": attn_iso.oracle_lifted(spec, x), "lifted": lifted_apply(w, x)}, size)
        cases = {
            "attn_lifted": lambda: lifted_apply(w, x),
            "attn_materialized": lambda: dense @ attn_iso.lift(x),
        }
        results += _run(cases, size, repeats)
    return results


def results_to_csv(results: Sequence[BenchResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_FIELDS)
    for r in results:
        w.writerow([r.op, r.size, r.repeats, r.median_ns, f"{r.ops_per_sec:.6g}"])
    return buf.getvalue()
