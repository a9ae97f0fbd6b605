import csv
import io

import numpy as np
import pytest

from matrixorder import trainer
from matrixorder.conv_iso import ConvSpec, build_wconv
from matrixorder.data2matrix import SeriesMatrix
from matrixorder.matcore import banded_matmat, banded_value_grad
from matrixorder.trainer import (AdamState, ConvNet, GradientCheckError, LinearRnnRegressor,
                                 TrainConfig, TrainingDivergedError, TrainReport, adam_step,
                                 check_param_grads, persistence_mse, series_split, stepwise_hidden,
                                 train_mnist, train_series)


def toy_digits(seed=0, n_train=120, n_test=60, size=12):
    """Tiny two-class image set: a bright bar on the left or the right half."""
    rng = np.random.default_rng(seed)

    def make(n):
        ys = rng.integers(0, 2, n)
        xs = rng.uniform(0, 0.2, (n, size, size))
        for k, y in enumerate(ys):
            c = 2 if y == 0 else size - 4
            xs[k, :, c:c + 2] += 0.8
        return xs, ys

    return (*make(n_train), *make(n_test))


def toy_cfg(**kw):
    base = dict(task="mnist", subset=120, epochs=2, batch=16, kernel_size=3, lr=1e-2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


# --- Adam --------------------------------------------------------------------------------------

def test_adam_zero_grad_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    out = adam_step(AdamState(0.1), p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(out["w"], p["w"])


def test_adam_first_step_hand_value():
    # m_hat = 1, v_hat = 1 after bias correction, so the step is lr / (1 + eps)
    out = adam_step(AdamState(0.1), {"w": np.array([0.0])}, {"w": np.array([1.0])})
    assert out["w"][0] == pytest.approx(-0.1 / (1.0 + 1e-8), rel=0, abs=1e-15)


def test_adam_first_step_is_sign_like():
    out = adam_step(AdamState(0.01), {"w": np.zeros(3)}, {"w": np.array([1e-3, -50.0, 7.0])})
    np.testing.assert_allclose(out["w"], [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_state_counts_steps_and_shapes():
    state = AdamState(0.1)
    p = {"w": np.ones((2, 3))}
    for _ in range(3):
        p = adam_step(state, p, {"w": np.ones((2, 3))})
    assert state.step == 3
    assert state.m["w"].shape == state.v["w"].shape == (2, 3)


def test_adam_reproducible():
    g = {"w": np.array([0.3, -0.2])}

    def run():
        s, p = AdamState(0.05), {"w": np.array([1.0, 1.0])}
        for _ in range(2):
            p = adam_step(s, p, g)
        return p["w"]

    assert np.array_equal(run(), run())


def test_adam_nan_names_parameter():
    with pytest.raises(TrainingDivergedError, match="'kernel'"):
        adam_step(AdamState(0.1), {"kernel": np.zeros(2)}, {"kernel": np.array([0.0, np.nan])})


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(AdamState(0.1), {"w": np.zeros(2)}, {"w": np.zeros(3)})


# --- config and report ----------------------------------------------------------------------------

@pytest.mark.parametrize("kw", [{"batch": 0}, {"window": 0}, {"epochs": -1}, {"backend": "gpu"}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_report_csv():
    r = TrainReport(epoch_losses=[1.0, 0.5], eval_metrics=[0.4, 0.6], final_metric=0.6, epochs_to_best=2)
    rows = list(csv.reader(io.StringIO(r.to_csv())))
    assert rows[0] == ["epoch", "train_loss", "eval_metric"]
    assert rows[1] == ["1", "1.0", "0.4"] and rows[2] == ["2", "0.5", "0.6"]
    assert rows[-1] == ["final", "0.6", "2"]


# --- gradient checks ----------------------------------------------------------------------------------

def test_check_param_grads_catches_wrong_gradient():
    params = {"w": np.array([1.0, 2.0])}
    loss = lambda p: float(np.sum(p["w"] ** 2))
    good = check_param_grads(loss, params, {"w": 2 * params["w"]})
    bad = check_param_grads(loss, params, {"w": 3 * params["w"]})
    assert good[0].passed and not bad[0].passed


def test_preflight_raises_on_wrong_gradient():
    params = {"w": np.array([1.0])}
    with pytest.raises(GradientCheckError, match="w"):
        trainer._preflight(lambda p: float(p["w"][0] ** 2),
                           lambda p: (0.0, {"w": np.array([0.0])}), params, seed=0)


def test_finite_guard():
    with pytest.raises(TrainingDivergedError):
        trainer._finite(float("inf"), {}, "step 1")
    with pytest.raises(TrainingDivergedError, match="'w'"):
        trainer._finite(1.0, {"w": np.array([np.nan])}, "step 1")


# --- MNIST network ---------------------------------------------------------------------------------

def test_tied_gradient_is_sum_of_untied_row_gradients(rng):
    net = ConvNet(10, 10, 3, 2)
    params = net.init_params(2, 10, seed=4)
    xs = rng.uniform(0, 1, (6, 100))
    ys = rng.integers(0, 10, 6)
    _, grads = net.loss_and_grad(params, xs, ys)

    # backpropagate by hand to the conv outputs, then differentiate every row separately
    z, _ = net._conv(params["kernel"], xs)
    pooled = net._pool(np.maximum(z, 0.0))
    _, dlogits = trainer._cross_entropy(pooled.reshape(6, -1) @ params["weight"].T + params["bias"], ys)
    dz = net._pool_back((dlogits @ params["weight"]).reshape(pooled.shape)) * (z > 0)
    for c in range(2):
        untied = build_wconv(ConvSpec(10, 10, params["kernel"][c], tied=False))
        per_row = banded_value_grad(untied, xs, dz[:, c])
        assert per_row.shape == (untied.rows, 9)
        np.testing.assert_allclose(per_row.sum(axis=0).reshape(3, 3), grads["kernel"][c], rtol=1e-12, atol=1e-15)


def test_matrix_and_oracle_backends_agree(rng):
    xs = rng.uniform(0, 1, (5, 144))
    ys = rng.integers(0, 10, 5)
    a, b = ConvNet(12, 12, 5, 2, "matrix"), ConvNet(12, 12, 5, 2, "oracle")
    params = a.init_params(3, 10, seed=0)
    la, ga = a.loss_and_grad(params, xs, ys)
    lb, gb = b.loss_and_grad(params, xs, ys)
    assert abs(la - lb) <= 1e-12
    for k in ga:
        np.testing.assert_allclose(ga[k], gb[k], rtol=1e-10, atol=1e-14)


def test_conv_matrix_output_matches_band(rng):
    net = ConvNet(8, 8, 3, 2)
    k = rng.uniform(-1, 1, (1, 3, 3))
    xs = rng.uniform(0, 1, (4, 64))
    z, bands = net._conv(k, xs)
    np.testing.assert_array_equal(z[:, 0], banded_matmat(bands[0], xs))


def test_odd_conv_output_rejected():
    with pytest.raises(ValueError, match="pool"):
        ConvNet(10, 10, 2, 2)


def test_train_toy_learns_and_is_deterministic():
    data = toy_digits()
    r1 = train_mnist(toy_cfg(epochs=5), data)
    r2 = train_mnist(toy_cfg(epochs=5), data)
    assert r1.step_losses == r2.step_losses and r1.eval_metrics == r2.eval_metrics
    assert len(r1.epoch_losses) == 5
    assert r1.epoch_losses[-1] < r1.epoch_losses[0]
    assert r1.final_metric >= 0.9
    assert all(g.passed for g in r1.grad_checks)
    assert {g.op for g in r1.grad_checks} == {"kernel", "weight", "bias"}


def test_train_toy_backends_same_steps():
    data = toy_digits(1)
    a = train_mnist(toy_cfg(backend="matrix"), data)
    b = train_mnist(toy_cfg(backend="oracle"), data)
    assert np.max(np.abs(np.subtract(a.step_losses, b.step_losses))) <= 1e-9


def test_lr_zero_leaves_params(mnist_dir):
    cfg = TrainConfig(data_dir=str(mnist_dir), subset=256, epochs=1, lr=0.0, seed=0, preflight=False)
    r = train_mnist(cfg)
    init = ConvNet(28, 28, 5, 2).init_params(1, 10, 0)
    for k in init:
        np.testing.assert_array_equal(r.params[k], init[k])
    assert r.final_metric < 0.25


def test_zero_epoch_mnist():
    r = train_mnist(toy_cfg(epochs=0), toy_digits())
    assert r.epoch_losses == [] and r.step_losses == []
    assert 0.0 <= r.final_metric <= 1.0


def test_subset_too_large():
    with pytest.raises(ValueError, match="exceeds"):
        train_mnist(toy_cfg(subset=500), toy_digits())


def test_missing_files_name_path(tmp_path):
    with pytest.raises(FileNotFoundError, match=str(tmp_path)):
        train_mnist(TrainConfig(data_dir=str(tmp_path)))


# --- series --------------------------------------------------------------------------------------------

def test_ar1_generator():
    s = trainer.synth_ar1(5000, 0.8, 1.0, seed=0).values.ravel()
    lag1 = np.corrcoef(s[:-1], s[1:])[0, 1]
    assert abs(lag1 - 0.8) < 0.03
    assert np.array_equal(s, trainer.synth_ar1(5000, 0.8, 1.0, seed=0).values.ravel())


def test_persistence_baseline():
    xs = np.arange(12.0).reshape(2, 6, 1)
    assert persistence_mse(xs, np.array([[6.0], [11.0]])) == 0.5


def test_stepwise_matches_matrix_form(rng):
    model = LinearRnnRegressor(6)
    params = model.init_params(2, 4, 1, seed=1)
    xs = rng.uniform(-1, 1, (3, 6, 2))
    assert np.max(np.abs(model.hidden_states(params, xs) - stepwise_hidden(params, xs))) <= 1e-12


def test_matrix_forward_debug_assertion(monkeypatch, rng):
    model = LinearRnnRegressor(4)
    params = model.init_params(1, 3, 1, seed=0)
    xs = rng.uniform(-1, 1, (2, 4, 1))
    monkeypatch.setattr(trainer, "stepwise_hidden", lambda p, x: stepwise_hidden(p, x) + 1e-9)
    with pytest.raises(AssertionError, match="stepwise"):
        model.hidden_states(params, xs)


def test_series_gradients_preflight():
    r = train_series(TrainConfig(task="series", epochs=0, series_len=300, seed=2))
    assert {g.op for g in r.grad_checks} == {"w_xh", "w_hh", "readout", "bias"}
    assert all(g.max_rel_err <= 1e-5 for g in r.grad_checks)


def test_constant_series_learned():
    cfg = TrainConfig(task="series", series=SeriesMatrix(np.full(400, 0.5)), epochs=50, seed=0, lr=1e-2)
    r = train_series(cfg)
    assert r.baseline_metric == 0.0
    assert min(r.eval_metrics) < 1e-4


def test_beats_persistence_on_ar1():
    r = train_series(TrainConfig(task="series", epochs=10, seed=0))
    assert r.final_metric < r.baseline_metric


def test_series_deterministic():
    cfg = TrainConfig(task="series", epochs=2, series_len=400, seed=5)
    assert train_series(cfg).step_losses == train_series(cfg).step_losses


def test_zero_epoch_series():
    r = train_series(TrainConfig(task="series", epochs=0, series_len=300))
    assert r.epoch_losses == [] and r.eval_metrics == []
    assert np.isfinite(r.final_metric)


def test_series_too_short():
    with pytest.raises(ValueError, match="too short"):
        series_split(TrainConfig(task="series", series=SeriesMatrix(np.arange(20.0)), window=24))


def test_split_is_chronological():
    s = SeriesMatrix(np.arange(100.0))
    tx, ty, vx, vy = series_split(TrainConfig(task="series", series=s, window=5))
    assert ty.max() < vx.min()
    assert tx.shape == (80 - 5, 5, 1) and vx.shape == (20 - 5, 5, 1)
