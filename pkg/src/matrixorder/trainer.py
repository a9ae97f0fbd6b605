"""Desk-scale training of the matrix formulations with hand-written gradients.

Two tasks:

* ``mnist``: tied banded convolution -> ReLU -> banded average pooling ->
  dense softmax classifier. The same network can run on a direct
  sliding-window convolution (``backend="oracle"``); with equal seeds the two
  backends see identical initializations and batches.
* ``series``: linear recurrence in block-lower-triangular form -> linear
  readout of the last hidden state, trained with MSE on sliding windows.

All parameters are float64 and updated with bias-corrected Adam.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import conv_iso
from .data2matrix import SeriesMatrix, load_idx_image_array, load_idx_labels, window_arrays
from .isocheck import GradReport
from .matcore import (banded_matmat, banded_rmatmat, banded_value_grad, block_lt_matmat,
                      tied_grad)
from .rnn_iso import RnnSpec, build_wrnn

log = logging.getLogger(__name__)

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

Params = dict[str, np.ndarray]


class TrainingDivergedError(FloatingPointError):
    """A loss, gradient or parameter became non-finite."""


class GradientCheckError(AssertionError):
    """Pre-flight finite-difference check disagreed with an analytic gradient."""


@dataclass
class TrainConfig:
    task: str = "mnist"
    batch: int = 64
    lr: float = 1e-3
    epochs: int = 10
    seed: int = 0
    subset: int = 2000
    window: int = 24
    horizon: int = 1
    data_dir: str = "data/mnist"
    eval_limit: int | None = None
    # mnist network
    kernel_size: int = 5
    pool: int = 2
    n_filters: int = 1
    backend: str = "matrix"
    # series model and synthetic data
    hidden: int = 8
    series_len: int = 2000
    ar_coef: float = 0.8
    noise_std: float = 1.0
    series: SeriesMatrix | None = None
    train_fraction: float = 0.8
    preflight: bool = True

    def __post_init__(self):
        for name in ("batch", "subset", "window", "horizon", "kernel_size", "pool",
                     "n_filters", "hidden", "series_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.lr < 0:
            raise ValueError("epochs and lr must be non-negative")
        if self.backend not in ("matrix", "oracle"):
            raise ValueError(f"unknown backend {self.backend!r}")


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    eval_metrics: list[float] = field(default_factory=list)
    final_metric: float = float("nan")
    epochs_to_best: int = 0
    metric_name: str = "accuracy"
    step_losses: list[float] = field(default_factory=list)
    baseline_metric: float | None = None
    grad_checks: list[GradReport] = field(default_factory=list)
    params: Params | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "eval_metric"])
        for e, (loss, metric) in enumerate(zip(self.epoch_losses, self.eval_metrics), start=1):
            w.writerow([e, repr(loss), repr(metric)])
        w.writerow(["final", repr(self.final_metric), self.epochs_to_best])
        return buf.getvalue()


# --- Adam -------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def adam_step(state: AdamState, params: Params, grads: Params) -> Params:
    """One bias-corrected Adam update. Moments and step count live in ``state``."""
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1 ** state.step)
        v_hat = v / (1 - b2 ** state.step)
        out[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


# --- gradient pre-flight ------------------------------------------------------------

def check_param_grads(loss_fn: Callable[[Params], float], params: Params, grads: Params,
                      fd_step: float = 1e-5, probes: int = 10, seed: int = 0,
                      bound: float = 1e-5,
                      crosses_kink: Callable[[Params, Params], bool] | None = None,
                      max_redraws: int = 100) -> list[GradReport]:
    """Central-difference directional derivatives of ``loss_fn`` for each parameter tensor.

    The error of a probe ``v`` is ``|fd - g.v|`` over ``max(|fd|, |g.v|, |g| |v|)``.
    The last term keeps near-orthogonal probes, whose directional derivative
    is tiny, from turning difference roundoff into a spurious failure.

    Central differences are meaningless across a ReLU kink, so a probe for
    which ``crosses_kink(plus, minus)`` is true is discarded and redrawn.
    """
    rng = np.random.default_rng(seed)
    reports = []
    for name in params:
        worst = 0.0
        done = redraws = 0
        while done < probes:
            v = rng.standard_normal(params[name].shape)
            plus = dict(params, **{name: params[name] + fd_step * v})
            minus = dict(params, **{name: params[name] - fd_step * v})
            if crosses_kink is not None and crosses_kink(plus, minus):
                redraws += 1
                if redraws > max_redraws:
                    raise GradientCheckError(f"{name}: every probe crosses a kink")
                continue
            fd = (loss_fn(plus) - loss_fn(minus)) / (2 * fd_step)
            analytic = float(np.sum(grads[name] * v))
            scale = max(abs(fd), abs(analytic), float(np.linalg.norm(grads[name]) * np.linalg.norm(v)))
            worst = max(worst, 0.0 if fd == analytic else abs(fd - analytic) / scale)
            done += 1
        reports.append(GradReport(name, worst, fd_step, bound))
    return reports


def _preflight(loss_fn, loss_and_grad, params: Params, seed: int, crosses_kink=None) -> list[GradReport]:
    _, grads = loss_and_grad(params)
    reports = check_param_grads(loss_fn, params, grads, seed=seed, crosses_kink=crosses_kink)
    failed = [r for r in reports if not r.passed]
    if failed:
        raise GradientCheckError("; ".join(f"{r.op}: rel err {r.max_rel_err:.3g}" for r in failed))
    return reports


def _finite(loss: float, params: Params, where: str) -> None:
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss at {where}")
    for name, p in params.items():
        if not np.all(np.isfinite(p)):
            raise TrainingDivergedError(f"parameter {name!r} became non-finite at {where}")


# --- MNIST network -------------------------------------------------------------------

class ConvNet:
    """conv(r x r, tied, valid) x F -> relu -> avgpool(p) -> dense -> softmax."""

    def __init__(self, img_h: int, img_w: int, kernel_size: int, pool: int, backend: str = "matrix"):
        self.img_h, self.img_w = img_h, img_w
        self.r, self.p = kernel_size, pool
        self.backend = backend
        self.geom = conv_iso.ConvSpec(img_h, img_w, np.zeros((kernel_size, kernel_size)))
        self.oh, self.ow = conv_iso.conv_output_shape(self.geom)
        if self.oh % pool or self.ow % pool:
            raise ValueError(f"conv output {self.oh}x{self.ow} not divisible by pool {pool}")
        self.pool_w = conv_iso.build_wpool(conv_iso.PoolSpec(self.oh, self.ow, pool))
        self.q = self.pool_w.rows

    def init_params(self, n_filters: int, n_classes: int, seed: int) -> Params:
        rng = np.random.default_rng(seed)
        r = self.r
        return {
            "kernel": rng.normal(0.0, 1.0 / r, (n_filters, r, r)),
            "weight": rng.normal(0.0, 0.01, (n_classes, n_filters * self.q)),
            "bias": np.zeros(n_classes),
        }

    # conv stage: (B, L) -> (B, F, P)
    def _conv(self, kernels: np.ndarray, xs: np.ndarray):
        if self.backend == "matrix":
            bands = [conv_iso.build_wconv(self.geom.with_kernel(k)) for k in kernels]
            return np.stack([banded_matmat(w, xs) for w in bands], axis=1), bands
        imgs = xs.reshape(-1, self.img_h, self.img_w)
        out = np.zeros((xs.shape[0], kernels.shape[0], self.oh, self.ow))
        for i in range(self.r):
            for j in range(self.r):
                patch = imgs[:, i:i + self.oh, j:j + self.ow]
                out += kernels[None, :, i, j, None, None] * patch[:, None]
        return out.reshape(xs.shape[0], kernels.shape[0], -1), None

    def _conv_grad(self, bands, xs: np.ndarray, dz: np.ndarray) -> np.ndarray:
        f = dz.shape[1]
        r2 = self.r * self.r
        if self.backend == "matrix":
            return np.stack([tied_grad(bands[c], banded_value_grad(bands[c], xs, dz[:, c]), r2)
                             for c in range(f)]).reshape(f, self.r, self.r)
        imgs = xs.reshape(-1, self.img_h, self.img_w)
        dzi = dz.reshape(-1, f, self.oh, self.ow)
        g = np.empty((f, self.r, self.r))
        for i in range(self.r):
            for j in range(self.r):
                patch = imgs[:, i:i + self.oh, j:j + self.ow]
                g[:, i, j] = np.einsum("bfuv,buv->f", dzi, patch)
        return g

    def _pool(self, a: np.ndarray) -> np.ndarray:
        b, f, _ = a.shape
        if self.backend == "matrix":
            return banded_matmat(self.pool_w, a.reshape(b * f, -1)).reshape(b, f, -1)
        p = self.p
        grid = a.reshape(b, f, self.oh // p, p, self.ow // p, p)
        return grid.mean(axis=(3, 5)).reshape(b, f, -1)

    def _pool_back(self, dpooled: np.ndarray) -> np.ndarray:
        b, f, _ = dpooled.shape
        if self.backend == "matrix":
            return banded_rmatmat(self.pool_w, dpooled.reshape(b * f, -1)).reshape(b, f, -1)
        p = self.p
        grid = dpooled.reshape(b, f, self.oh // p, 1, self.ow // p, 1) / (p * p)
        return np.broadcast_to(grid, (b, f, self.oh // p, p, self.ow // p, p)).reshape(b, f, -1)

    def logits(self, params: Params, xs: np.ndarray) -> np.ndarray:
        z, _ = self._conv(params["kernel"], xs)
        feat = self._pool(np.maximum(z, 0.0)).reshape(xs.shape[0], -1)
        return feat @ params["weight"].T + params["bias"]

    def loss(self, params: Params, xs: np.ndarray, ys: np.ndarray) -> float:
        return float(_cross_entropy(self.logits(params, xs), ys)[0])

    def relu_pattern_differs(self, a: Params, b: Params, xs: np.ndarray) -> bool:
        za, _ = self._conv(a["kernel"], xs)
        zb, _ = self._conv(b["kernel"], xs)
        return bool(np.any((za > 0) != (zb > 0)))

    def loss_and_grad(self, params: Params, xs: np.ndarray, ys: np.ndarray) -> tuple[float, Params]:
        b = xs.shape[0]
        z, bands = self._conv(params["kernel"], xs)
        a = np.maximum(z, 0.0)
        pooled = self._pool(a)
        feat = pooled.reshape(b, -1)
        logits = feat @ params["weight"].T + params["bias"]
        loss, dlogits = _cross_entropy(logits, ys)
        dfeat = dlogits @ params["weight"]
        dz = self._pool_back(dfeat.reshape(pooled.shape)) * (z > 0)
        return loss, {
            "kernel": self._conv_grad(bands, xs, dz),
            "weight": dlogits.T @ feat,
            "bias": dlogits.sum(axis=0),
        }

    def accuracy(self, params: Params, xs: np.ndarray, ys: np.ndarray, chunk: int = 500) -> float:
        hits = 0
        for s in range(0, xs.shape[0], chunk):
            hits += int(np.sum(np.argmax(self.logits(params, xs[s:s + chunk]), axis=1) == ys[s:s + chunk]))
        return hits / xs.shape[0]


def _cross_entropy(logits: np.ndarray, ys: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    b = logits.shape[0]
    loss = -float(np.mean(logp[np.arange(b), ys]))
    d = np.exp(logp)
    d[np.arange(b), ys] -= 1.0
    return loss, d / b


def load_mnist(data_dir: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    paths = {k: Path(data_dir) / v for k, v in MNIST_FILES.items()}
    for p in paths.values():
        if not p.exists():
            raise FileNotFoundError(f"missing MNIST file: {p}")
    return (load_idx_image_array(paths["train_images"]), load_idx_labels(paths["train_labels"]),
            load_idx_image_array(paths["test_images"]), load_idx_labels(paths["test_labels"]))


def _batches(n: int, batch: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for s in range(0, n, batch):
        yield order[s:s + batch]


def train_mnist(cfg: TrainConfig, data=None) -> TrainReport:
    """Train the banded conv net on the first ``cfg.subset`` training images.

    ``data`` optionally supplies ``(train_x, train_y, test_x, test_y)`` directly;
    otherwise the four IDX files are read from ``cfg.data_dir``.
    """
    tx, ty, vx, vy = load_mnist(cfg.data_dir) if data is None else data
    if cfg.subset > tx.shape[0]:
        raise ValueError(f"subset {cfg.subset} exceeds the {tx.shape[0]} available training images")
    h, w = tx.shape[1:]
    tx = tx[:cfg.subset].reshape(cfg.subset, -1)
    ty = ty[:cfg.subset]
    if cfg.eval_limit is not None:
        vx, vy = vx[:cfg.eval_limit], vy[:cfg.eval_limit]
    vx = vx.reshape(vx.shape[0], -1)
    net = ConvNet(h, w, cfg.kernel_size, cfg.pool, cfg.backend)
    params = net.init_params(cfg.n_filters, 10, cfg.seed)
    report = TrainReport(metric_name="accuracy")

    if cfg.preflight:
        probe = tx[:8], ty[:8]
        report.grad_checks = _preflight(
            lambda p: net.loss(p, *probe), lambda p: net.loss_and_grad(p, *probe), params, cfg.seed,
            crosses_kink=lambda a, b: net.relu_pattern_differs(a, b, probe[0]))

    state = AdamState(cfg.lr)
    best = -np.inf
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in _batches(cfg.subset, cfg.batch, cfg.seed, epoch):
            loss, grads = net.loss_and_grad(params, tx[idx], ty[idx])
            _finite(loss, params, f"epoch {epoch + 1}")
            report.step_losses.append(loss)
            total += loss * idx.size
            params = adam_step(state, params, grads)
        acc = net.accuracy(params, vx, vy)
        report.epoch_losses.append(total / cfg.subset)
        report.eval_metrics.append(acc)
        if acc > best:
            best, report.epochs_to_best = acc, epoch + 1
        log.info("epoch %d loss %.5f acc %.4f", epoch + 1, report.epoch_losses[-1], acc)
    report.final_metric = report.eval_metrics[-1] if report.eval_metrics else net.accuracy(params, vx, vy)
    report.params = params
    return report


# --- series ----------------------------------------------------------------------------

def synth_ar1(length: int, coef: float = 0.8, noise_std: float = 1.0, seed: int = 0) -> SeriesMatrix:
    """``s_t = coef * s_{t-1} + noise`` from ``s_0 = 0``."""
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, noise_std, length)
    s = np.empty(length)
    prev = 0.0
    for t in range(length):
        prev = coef * prev + noise[t]
        s[t] = prev
    return SeriesMatrix(s)


class LinearRnnRegressor:
    """Linear recurrence in unrolled matrix form, read out from the last hidden state."""

    def __init__(self, t_steps: int, check_tol: float | None = 1e-10):
        self.t_steps = t_steps
        self.check_tol = check_tol

    def init_params(self, in_dim: int, hidden: int, out_dim: int, seed: int) -> Params:
        rng = np.random.default_rng(seed)
        return {
            "w_xh": rng.uniform(-0.5, 0.5, (hidden, in_dim)),
            "w_hh": rng.uniform(-0.3, 0.3, (hidden, hidden)) / np.sqrt(hidden),
            "readout": rng.uniform(-0.1, 0.1, (out_dim, hidden)),
            "bias": np.zeros(out_dim),
        }

    def hidden_states(self, params: Params, xs: np.ndarray) -> np.ndarray:
        w = build_wrnn(RnnSpec(self.t_steps, params["w_xh"], params["w_hh"]))
        hs = block_lt_matmat(w, xs)
        if self.check_tol is not None:
            ref = stepwise_hidden(params, xs)
            err = float(np.max(np.abs(hs - ref), initial=0.0))
            if err > self.check_tol:
                raise AssertionError(f"matrix-form forward deviates from stepwise recurrence by {err:.3g}")
        return hs

    def predict(self, params: Params, xs: np.ndarray) -> np.ndarray:
        return self.hidden_states(params, xs)[:, -1] @ params["readout"].T + params["bias"]

    def loss(self, params: Params, xs: np.ndarray, ys: np.ndarray) -> float:
        return float(np.mean((self.predict(params, xs) - ys) ** 2))

    def loss_and_grad(self, params: Params, xs: np.ndarray, ys: np.ndarray) -> tuple[float, Params]:
        hs = self.hidden_states(params, xs)
        pred = hs[:, -1] @ params["readout"].T + params["bias"]
        resid = pred - ys
        loss = float(np.mean(resid ** 2))
        dpred = 2.0 * resid / resid.size
        g_u = np.zeros_like(params["w_xh"])
        g_v = np.zeros_like(params["w_hh"])
        delta = dpred @ params["readout"]
        # the loss reads only h_T; walk the recurrence back from there
        for t in range(self.t_steps - 1, -1, -1):
            g_u += delta.T @ xs[:, t]
            if t > 0:
                g_v += delta.T @ hs[:, t - 1]
                delta = delta @ params["w_hh"]
        return loss, {
            "w_xh": g_u,
            "w_hh": g_v,
            "readout": dpred.T @ hs[:, -1],
            "bias": dpred.sum(axis=0),
        }


def stepwise_hidden(params: Params, xs: np.ndarray) -> np.ndarray:
    """Batched ``h_t = U x_t + V h_{t-1}``; (B, T, d) -> (B, T, M)."""
    u, v = params["w_xh"], params["w_hh"]
    h = np.zeros((xs.shape[0], u.shape[0]))
    out = np.empty((xs.shape[0], xs.shape[1], u.shape[0]))
    for t in range(xs.shape[1]):
        h = xs[:, t] @ u.T + h @ v.T
        out[:, t] = h
    return out


def persistence_mse(xs: np.ndarray, ys: np.ndarray) -> float:
    """MSE of predicting the target as the window's last observation."""
    return float(np.mean((xs[:, -1] - ys) ** 2))


def series_split(cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    series = cfg.series if cfg.series is not None else synth_ar1(
        cfg.series_len, cfg.ar_coef, cfg.noise_std, cfg.seed)
    cut = int(series.t_steps * cfg.train_fraction)
    train = SeriesMatrix(series.values[:cut])
    test = SeriesMatrix(series.values[cut:])
    tx, ty = window_arrays(train, cfg.window, cfg.horizon)
    vx, vy = window_arrays(test, cfg.window, cfg.horizon)
    return tx, ty, vx, vy


def train_series(cfg: TrainConfig) -> TrainReport:
    """Fit the linear recurrence to forecast ``horizon`` steps past each window.

    The eval metric is plain test-set MSE; ``baseline_metric`` holds the
    persistence forecast's MSE on the same windows.
    """
    tx, ty, vx, vy = series_split(cfg)
    model = LinearRnnRegressor(cfg.window)
    params = model.init_params(tx.shape[2], cfg.hidden, ty.shape[1], cfg.seed)
    report = TrainReport(metric_name="mse", baseline_metric=persistence_mse(vx, vy))

    if cfg.preflight:
        probe = tx[:16], ty[:16]
        report.grad_checks = _preflight(lambda p: model.loss(p, *probe),
                                        lambda p: model.loss_and_grad(p, *probe), params, cfg.seed)

    state = AdamState(cfg.lr)
    best = np.inf
    n = tx.shape[0]
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in _batches(n, cfg.batch, cfg.seed, epoch):
            loss, grads = model.loss_and_grad(params, tx[idx], ty[idx])
            _finite(loss, params, f"epoch {epoch + 1}")
            report.step_losses.append(loss)
            total += loss * idx.size
            params = adam_step(state, params, grads)
        mse = model.loss(params, vx, vy)
        report.epoch_losses.append(total / n)
        report.eval_metrics.append(mse)
        if mse < best:
            best, report.epochs_to_best = mse, epoch + 1
        log.info("epoch %d loss %.6f test mse %.6f", epoch + 1, report.epoch_losses[-1], mse)
    report.final_metric = report.eval_metrics[-1] if report.eval_metrics else model.loss(params, vx, vy)
    report.params = params
    return report
