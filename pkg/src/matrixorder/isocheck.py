"""Randomized equivalence suites pairing each structured matrix with a direct oracle.

Each trial draws its instance from ``default_rng([seed, trial])`` so a suite is
bit-reproducible for a fixed seed. A nonzero ``perturb`` adds that amount to
one randomly chosen stored value of every built matrix; it is the negative
control, and a correct harness must then report failure.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from typing import Callable, Iterable

import numpy as np

from . import attn_iso, conv_iso, rnn_iso
from .matcore import (BandedMatrix, BlockLowerTriangular, LiftedAttnMatrix, banded_matvec,
                      block_lt_matvec, lifted_apply)

DEFAULT_TOL = {
    "conv": 1e-13,
    "pool": 1e-13,
    "rnn": 1e-10,
    "attn_tensor": 1e-10,
    "attn_lifted": 1e-12,
}
SUITES = ("conv", "pool", "rnn", "attn")

# random instance ranges
MAX_IMG = 12
MAX_KERNEL = 4
MAX_STRIDE = 2
POOL_WINDOWS = (1, 2, 4)
MAX_T = 8
MAX_RNN_DIM = 5
MAX_TOKENS = 8
MAX_EMBED = 6

REPORT_FIELDS = ("suite", "trials", "seed", "max_abs_err", "tolerance", "passed")


@dataclass(frozen=True)
class CheckReport:
    suite: str
    trials: int
    max_abs_err: float
    tolerance: float
    seed: int

    @property
    def passed(self) -> bool:
        return bool(self.max_abs_err <= self.tolerance)


@dataclass(frozen=True)
class GradReport:
    op: str
    max_rel_err: float
    fd_step: float
    bound: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err <= self.bound)


def _trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng([seed, trial])


def perturb_banded(w: BandedMatrix, rng: np.random.Generator, delta: float) -> BandedMatrix:
    r, c, _ = w.coords()
    pick = rng.integers(r.size)
    slot = int(np.searchsorted(w.col_idx[r[pick], :w.row_nnz[r[pick]]], c[pick]))
    vals = w.vals.copy()
    vals[r[pick], slot] += delta
    return w.with_values(vals, tied=False)


def perturb_block_lt(w: BlockLowerTriangular, rng: np.random.Generator, delta: float) -> BlockLowerTriangular:
    i = int(rng.integers(w.t_steps))
    j = int(rng.integers(i + 1))
    a, b = int(rng.integers(w.block_rows)), int(rng.integers(w.block_cols))
    blocks = w.blocks.copy()
    blocks[i, j, a, b] += delta
    return BlockLowerTriangular(w.t_steps, w.block_rows, w.block_cols, blocks)


def perturb_lifted(w: LiftedAttnMatrix, rng: np.random.Generator, delta: float) -> LiftedAttnMatrix:
    vals = w.vals.copy()
    vals[rng.integers(vals.size)] += delta
    return w.with_values(vals)


def _run(trials: int, body: Callable[[np.random.Generator], float], seed: int) -> float:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    return max(body(_trial_rng(seed, t)) for t in range(trials))


def check_conv_iso(trials: int = 200, seed: int = 0, tol: float | None = None,
                   perturb: float = 0.0) -> CheckReport:
    def body(rng):
        r = int(rng.integers(1, MAX_KERNEL + 1))
        m = int(rng.integers(r, MAX_IMG + 1))
        n = int(rng.integers(r, MAX_IMG + 1))
        s = int(rng.integers(1, MAX_STRIDE + 1))
        img = rng.uniform(-1, 1, (m, n))
        k = rng.uniform(-1, 1, (r, r))
        w = conv_iso.build_wconv(conv_iso.ConvSpec(m, n, k, s, conv_iso.ConvMode.VALID2D))
        if perturb:
            w = perturb_banded(w, rng, perturb)
        got = banded_matvec(w, img.ravel())
        want = conv_iso.oracle_conv2d(img, k, s).ravel()
        return float(np.max(np.abs(got - want)))

    tol = DEFAULT_TOL["conv"] if tol is None else tol
    return CheckReport("conv", trials, _run(trials, body, seed), tol, seed)


def check_pool_iso(trials: int = 200, seed: int = 0, tol: float | None = None,
                   perturb: float = 0.0) -> CheckReport:
    def body(rng):
        p = int(rng.choice(POOL_WINDOWS))
        m = p * int(rng.integers(1, MAX_IMG // p + 1))
        n = p * int(rng.integers(1, MAX_IMG // p + 1))
        img = rng.uniform(-1, 1, (m, n))
        w = conv_iso.build_wpool(conv_iso.PoolSpec(m, n, p))
        if perturb:
            w = perturb_banded(w, rng, perturb)
        got = banded_matvec(w, img.ravel())
        return float(np.max(np.abs(got - conv_iso.oracle_avgpool(img, p).ravel())))

    tol = DEFAULT_TOL["pool"] if tol is None else tol
    return CheckReport("pool", trials, _run(trials, body, seed), tol, seed)


def random_rnn_spec(rng: np.random.Generator, t: int | None = None) -> rnn_iso.RnnSpec:
    t = int(rng.integers(1, MAX_T + 1)) if t is None else t
    d = int(rng.integers(1, MAX_RNN_DIM + 1))
    m = int(rng.integers(1, MAX_RNN_DIM + 1))
    return rnn_iso.RnnSpec(t, rng.uniform(-0.5, 0.5, (m, d)), rng.uniform(-0.5, 0.5, (m, m)))


def check_rnn_iso(trials: int = 200, seed: int = 0, tol: float | None = None,
                  perturb: float = 0.0, t_steps: int | None = None) -> CheckReport:
    def body(rng):
        spec = random_rnn_spec(rng, t_steps)
        xs = rng.uniform(-1, 1, (spec.t_steps, spec.in_dim))
        w = rnn_iso.build_wrnn(spec)
        if perturb:
            w = perturb_block_lt(w, rng, perturb)
        got = rnn_iso.rnn_forward_matrix(w, xs.ravel())
        want = rnn_iso.oracle_rnn(spec, xs).ravel()
        return float(np.max(np.abs(got - want)))

    tol = DEFAULT_TOL["rnn"] if tol is None else tol
    return CheckReport("rnn", trials, _run(trials, body, seed), tol, seed)


def random_lifted_spec(rng: np.random.Generator, n: int | None = None) -> attn_iso.LiftedSpec:
    n = int(rng.integers(1, MAX_TOKENS + 1)) if n is None else n
    m = int(rng.integers(1, MAX_TOKENS + 1))
    patch = int(rng.integers(1, n + 1))
    return attn_iso.LiftedSpec(rng.uniform(-1, 1, (m, n)), rng.uniform(-1, 1, (n, n)),
                               rng.uniform(-1, 1, (m, n)), attn_iso.contiguous_patches(n, patch))


def check_attn_iso(trials: int = 200, seed: int = 0, tol: float | None = None,
                   perturb: float = 0.0, seq_len: int | None = None) -> tuple[CheckReport, CheckReport]:
    """Two sub-suites: tensor contraction vs softmax attention, lifted matrix vs triple sum."""

    def tensor_body(rng):
        n = int(rng.integers(1, MAX_TOKENS + 1)) if seq_len is None else seq_len
        d = int(rng.integers(1, MAX_EMBED + 1))
        spec = attn_iso.AttnSpec(*(rng.uniform(-1, 1, (d, d)) for _ in range(3)))
        x = rng.uniform(-1, 1, (n, d))
        t = attn_iso.assemble_t_att(spec, x)
        if perturb:
            vals = t.values.copy()
            vals[tuple(int(rng.integers(s)) for s in vals.shape)] += perturb
            t = attn_iso.AttnTensor(vals)
        got = attn_iso.contract_t_att(t, spec.w_v)
        return float(np.max(np.abs(got - attn_iso.oracle_attention(spec, x))))

    def lifted_body(rng):
        spec = random_lifted_spec(rng, seq_len)
        x = rng.uniform(-1, 1, spec.n)
        w = attn_iso.build_w_sa(spec)
        if perturb:
            w = perturb_lifted(w, rng, perturb)
        return float(np.max(np.abs(lifted_apply(w, x) - attn_iso.oracle_lifted(spec, x))))

    t_tol = DEFAULT_TOL["attn_tensor"] if tol is None else tol
    l_tol = DEFAULT_TOL["attn_lifted"] if tol is None else tol
    # distinct seed streams per sub-suite
    return (CheckReport("attn_tensor", trials, _run(trials, tensor_body, seed), t_tol, seed),
            CheckReport("attn_lifted", trials, _run(trials, lifted_body, seed + 1_000_003), l_tol, seed))


def run_suites(suite: str, trials: int = 200, seed: int = 0, tol: float | None = None,
               perturb: float = 0.0) -> list[CheckReport]:
    names = SUITES if suite == "all" else (suite,)
    reports: list[CheckReport] = []
    for name in names:
        if name == "conv":
            reports.append(check_conv_iso(trials, seed, tol, perturb))
        elif name == "pool":
            reports.append(check_pool_iso(trials, seed, tol, perturb))
        elif name == "rnn":
            reports.append(check_rnn_iso(trials, seed, tol, perturb))
        elif name == "attn":
            reports.extend(check_attn_iso(trials, seed, tol, perturb))
        else:
            raise ValueError(f"unknown suite {name!r}")
    return reports


def reports_to_csv(reports: Iterable[CheckReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_FIELDS)
    for r in reports:
        writer.writerow([r.suite, r.trials, r.seed, repr(r.max_abs_err), repr(r.tolerance),
                         str(r.passed).lower()])
    return buf.getvalue()


# --- finite-difference gradient checks -------------------------------------------

def apply_linear(w, x) -> np.ndarray:
    if isinstance(w, BandedMatrix):
        return banded_matvec(w, x)
    if isinstance(w, BlockLowerTriangular):
        return block_lt_matvec(w, x)
    if isinstance(w, LiftedAttnMatrix):
        raise TypeError("lifted attention is bilinear; use grad_check_bilinear")
    return np.asarray(w, dtype=np.float64) @ np.asarray(x, dtype=np.float64)


def relative_error(fd: np.ndarray, analytic: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(fd), initial=0.0)))
    diff = float(np.max(np.abs(fd - analytic), initial=0.0))
    return 0.0 if diff == 0.0 else diff / scale


_ACTIVATIONS = {
    None: (lambda z: z, lambda z: np.ones_like(z)),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z: (z > 0).astype(np.float64)),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
}


def grad_check_linear(w, x, fd_step: float = 1e-5, probes: int = 10, seed: int = 0,
                      bound: float = 1e-6, activation: str | None = None) -> GradReport:
    """Central-difference directional derivatives of ``act(W x)`` vs ``act'(Wx) * (W v)``."""
    if fd_step <= 0:
        raise ValueError("fd_step must be positive")
    act, dact = _ACTIVATIONS[activation]
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    slope = dact(apply_linear(w, x))
    worst = 0.0
    for _ in range(probes):
        v = rng.standard_normal(x.size)
        fd = (act(apply_linear(w, x + fd_step * v)) - act(apply_linear(w, x - fd_step * v))) / (2 * fd_step)
        worst = max(worst, relative_error(fd, slope * apply_linear(w, v)))
    name = type(w).__name__ if activation is None else f"{type(w).__name__}+{activation}"
    return GradReport(name, worst, fd_step, bound)


def grad_check_bilinear(w: LiftedAttnMatrix, x, fd_step: float = 1e-5, probes: int = 10,
                        seed: int = 0, bound: float = 1e-5) -> GradReport:
    if fd_step <= 0:
        raise ValueError("fd_step must be positive")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    jac = attn_iso.lifted_jacobian(w, x)
    worst = 0.0
    for _ in range(probes):
        v = rng.standard_normal(x.size)
        fd = (lifted_apply(w, x + fd_step * v) - lifted_apply(w, x - fd_step * v)) / (2 * fd_step)
        worst = max(worst, relative_error(fd, jac @ v))
    return GradReport("LiftedAttnMatrix", worst, fd_step, bound)


def report_dict(r: CheckReport) -> dict:
    d = asdict(r)
    d["passed"] = r.passed
    return d
