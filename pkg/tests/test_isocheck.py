import csv
import io

import numpy as np
import pytest

from matrixorder import isocheck
from matrixorder.attn_iso import LiftedSpec, build_w_sa, lifted_jacobian
from matrixorder.conv_iso import ConvSpec, PoolSpec, build_wconv, build_wpool
from matrixorder.isocheck import (CheckReport, GradReport, check_attn_iso, check_conv_iso,
                                  check_pool_iso, check_rnn_iso, grad_check_bilinear,
                                  grad_check_linear, perturb_banded, reports_to_csv, run_suites)
from matrixorder.matcore import banded_matvec
from matrixorder.rnn_iso import RnnSpec, build_wrnn


# --- suites -----------------------------------------------------------------------------------

def test_conv_suite_passes():
    r = check_conv_iso(200, seed=0)
    assert r.passed and r.max_abs_err <= 1e-13 and r.trials == 200


def test_conv_suite_zero_tolerance_fails():
    r = check_conv_iso(200, seed=0, tol=0.0)
    assert r.max_abs_err > 0 and not r.passed


@pytest.mark.parametrize("check", [check_conv_iso, check_pool_iso, check_rnn_iso])
def test_suite_deterministic(check):
    assert check(50, seed=7) == check(50, seed=7)


def test_attn_suite_deterministic():
    assert check_attn_iso(50, seed=7) == check_attn_iso(50, seed=7)


def test_different_seeds_differ():
    # clean errors sit on a few ulp values, so compare perturbed runs
    a = check_conv_iso(20, seed=1, perturb=1e-3).max_abs_err
    assert a != check_conv_iso(20, seed=2, perturb=1e-3).max_abs_err


def test_rnn_suite_passes():
    r = check_rnn_iso(200, seed=0)
    assert r.passed and r.tolerance == 1e-10


def test_rnn_single_step_exact():
    assert check_rnn_iso(100, seed=3, t_steps=1).max_abs_err <= 1e-15


def test_attn_suite_passes():
    tensor, lifted = check_attn_iso(100, seed=0)
    assert (tensor.suite, lifted.suite) == ("attn_tensor", "attn_lifted")
    assert tensor.passed and tensor.tolerance == 1e-10
    assert lifted.passed and lifted.tolerance == 1e-12


def test_attn_single_token_exact():
    tensor, lifted = check_attn_iso(100, seed=0, seq_len=1)
    assert tensor.max_abs_err <= 1e-15 and lifted.max_abs_err <= 1e-15


def test_pool_suite_passes():
    assert check_pool_iso(200, seed=0).passed


def test_pool_constant_and_identity_exact(rng):
    np.testing.assert_array_equal(banded_matvec(build_wpool(PoolSpec(8, 8, 4)), np.full(64, -0.75)),
                                  np.full(4, -0.75))
    x = rng.uniform(-1, 1, 30)
    np.testing.assert_array_equal(banded_matvec(build_wpool(PoolSpec(5, 6, 1)), x), x)


def test_zero_trials_rejected():
    with pytest.raises(ValueError):
        check_conv_iso(0)


def test_unknown_suite():
    with pytest.raises(ValueError, match="unknown suite"):
        run_suites("mlp")


def test_run_all_covers_every_suite():
    names = [r.suite for r in run_suites("all", trials=5)]
    assert names == ["conv", "pool", "rnn", "attn_tensor", "attn_lifted"]


# --- negative controls ---------------------------------------------------------------------

@pytest.mark.parametrize("suite", ["conv", "pool", "rnn", "attn"])
def test_perturbed_suite_fails(suite):
    for r in run_suites(suite, trials=50, seed=0, perturb=1e-3):
        assert not r.passed
        assert r.max_abs_err >= 1e-4


def test_every_slot_perturbation_is_detected(rng):
    """Each stored conv entry, bumped alone, shows up in the product for a generic input."""
    k = rng.uniform(-1, 1, (3, 3))
    w = build_wconv(ConvSpec(6, 6, k))
    x = rng.uniform(0.5, 1.0, 36)
    base = banded_matvec(w, x)
    for r in range(w.rows):
        for s in range(w.row_nnz[r]):
            vals = w.vals.copy()
            vals[r, s] += 1e-3
            diff = banded_matvec(w.with_values(vals, tied=False), x) - base
            assert np.abs(diff[r]) >= 5e-4
            assert np.count_nonzero(diff) == 1


def test_perturb_helper_changes_one_entry(rng):
    w = build_wconv(ConvSpec(5, 5, rng.uniform(-1, 1, (2, 2))))
    p = perturb_banded(w, rng, 1e-3)
    assert np.count_nonzero(p.vals != w.vals) == 1
    assert not p.tied


# --- report types ----------------------------------------------------------------------------

def test_passed_iff_within_tolerance():
    assert CheckReport("conv", 1, 1e-13, 1e-13, 0).passed
    assert not CheckReport("conv", 1, 1.1e-13, 1e-13, 0).passed
    assert GradReport("x", 1e-6, 1e-5, 1e-6).passed
    assert not GradReport("x", 2e-6, 1e-5, 1e-6).passed


def test_csv_schema():
    text = reports_to_csv(run_suites("all", trials=3, seed=5))
    rows = list(csv.DictReader(io.StringIO(text)))
    assert list(rows[0]) == ["suite", "trials", "seed", "max_abs_err", "tolerance", "passed"]
    assert len(rows) == 5
    for row in rows:
        assert row["passed"] in ("true", "false")
        assert int(row["trials"]) == 3 and int(row["seed"]) == 5
        float(row["max_abs_err"])


# --- finite-difference checks ------------------------------------------------------------------

def test_grad_identity(rng):
    r = grad_check_linear(np.eye(6), rng.uniform(-1, 1, 6))
    assert r.max_rel_err <= 1e-10 and r.passed


def test_grad_band_map(rng):
    w = build_wconv(ConvSpec(8, 8, rng.uniform(-1, 1, (3, 3))))
    assert grad_check_linear(w, rng.uniform(-1, 1, 64)).passed


def test_grad_block_lt_map(rng):
    w = build_wrnn(RnnSpec(5, rng.uniform(-0.5, 0.5, (3, 2)), rng.uniform(-0.5, 0.5, (3, 3))))
    assert grad_check_linear(w, rng.uniform(-1, 1, 10)).passed


def test_grad_large_step_linear_still_exact(rng):
    # central differences carry no truncation error on a linear map
    w = build_wconv(ConvSpec(6, 6, rng.uniform(-1, 1, (3, 3))))
    assert grad_check_linear(w, rng.uniform(-1, 1, 36), fd_step=1.0).passed


def test_grad_large_step_fails_through_nonlinearity(rng):
    w = build_wconv(ConvSpec(6, 6, rng.uniform(-1, 1, (3, 3))))
    x = rng.uniform(-1, 1, 36)
    assert grad_check_linear(w, x, activation="tanh").passed
    assert not grad_check_linear(w, x, fd_step=1.0, activation="tanh").passed


def test_grad_nonpositive_step():
    with pytest.raises(ValueError):
        grad_check_linear(np.eye(2), np.ones(2), fd_step=0.0)


def test_grad_lifted_rejected_by_linear_check():
    w = build_w_sa(LiftedSpec(np.eye(2), np.eye(2), np.eye(2)))
    with pytest.raises(TypeError):
        grad_check_linear(w, np.ones(2))


def test_bilinear_identity_derivative():
    w = build_w_sa(LiftedSpec(np.eye(4), np.eye(4), np.eye(4)))
    x = np.array([1.0, 0.0, 0.0, 0.0])
    assert lifted_jacobian(w, x)[0, 0] == 2.0
    assert grad_check_bilinear(w, x).passed


def test_bilinear_random(rng):
    spec = isocheck.random_lifted_spec(rng, 4)
    w = build_w_sa(spec)
    r = grad_check_bilinear(w, rng.uniform(-1, 1, 4))
    assert r.passed and r.bound == 1e-5


def test_bilinear_zero_point(rng):
    w = build_w_sa(isocheck.random_lifted_spec(rng, 5))
    assert not lifted_jacobian(w, np.zeros(5)).any()
    assert grad_check_bilinear(w, np.zeros(5)).max_rel_err == 0.0
