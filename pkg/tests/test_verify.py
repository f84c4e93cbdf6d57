"""Audits: gradient FD, estimator concentration, drift bound, kernel checks."""

import numpy as np
import pytest

from conftest import paired_from_arrays
from kalign.adapter import AdapterParams, identity_params
from kalign.kernels import KernelSpec, psd_probe
from kalign.objective import alignment_loss_and_grad, total_loss_and_grad
from kalign.store import PairBatch
from kalign.verify import (concentration_experiment, default_audit_specs,
                           gradient_audit, kernel_audit,
                           make_concentration_corpus, prop2_audit, run_all)

BLOCKS = ("dW", "db", "dlog_gamma", "dcoef0",
          "feature.dW", "feature.db", "feature.dR")


# ---------------------------------------------------------------- gradient

def test_gradient_audit_passes_across_families():
    result = gradient_audit(seed=0, trials=16)
    assert result.passed
    assert set(result.worst) == set(BLOCKS)
    assert all(v < result.tolerance for v in result.worst.values())
    assert result.coords_checked == 16 * len(BLOCKS)


def test_gradient_audit_linear_kernel_is_nearly_exact():
    # degree-1 unnormalized k1: the loss is quadratic in (gamma, coef0),
    # so central differences on those blocks carry no truncation term
    rng = np.random.default_rng(3)
    n, d = 10, 4
    paired = paired_from_arrays(rng.standard_normal((n, d)),
                                rng.standard_normal((n, d)))
    params = AdapterParams(0.2 * rng.standard_normal((d, d)),
                           0.2 * rng.standard_normal(d), -0.4, 0.9)
    k1t = KernelSpec(degree=1, normalized=False)
    k2 = KernelSpec(gamma=1.0 / d)
    batch = PairBatch(pairs=np.array([[0, 5], [1, 7], [2, 9], [3, 8]]),
                      batch_size=4)
    h = 1e-5

    def total_at(p):
        bd, _ = total_loss_and_grad(p, paired, batch, 0.7, k2, k1_template=k1t)
        return bd.total

    _, grads = total_loss_and_grad(params, paired, batch, 0.7, k2,
                                   k1_template=k1t)

    def rel_err(block, analytic, flat_idx=None):
        plus, minus = params.copy(), params.copy()
        for p, sign in ((plus, h), (minus, -h)):
            if block == "dW":
                p.W.ravel()[flat_idx] += sign
            elif block == "db":
                p.b[flat_idx] += sign
            elif block == "dlog_gamma":
                p.log_gamma += sign
            else:
                p.coef0 += sign
        fd = (total_at(plus) - total_at(minus)) / (2 * h)
        return abs(analytic - fd) / max(abs(fd), 1e-3)

    assert rel_err("dlog_gamma", grads.dlog_gamma) < 1e-9
    assert rel_err("dcoef0", grads.dcoef0) < 1e-9
    # W and b enter the kernel quadratically; those blocks keep an h^2
    # truncation term and only promise the audit's 1e-6 gate
    for i in range(d * d):
        assert rel_err("dW", grads.dW.ravel()[i], i) < 1e-6
    for i in range(d):
        assert rel_err("db", grads.db[i], i) < 1e-6


def test_gradient_audit_flags_corrupted_block():
    result = gradient_audit(seed=0, trials=4, corrupt_block="db")
    assert not result.passed
    assert result.worst["db"] >= result.tolerance
    clean = {k: v for k, v in result.worst.items() if k != "db"}
    assert all(v < result.tolerance for v in clean.values())


def test_gradient_audit_rejects_zero_trials():
    with pytest.raises(ValueError, match="trials must be >= 1"):
        gradient_audit(trials=0)


def test_gradient_audit_deterministic_given_seed():
    a = gradient_audit(seed=7, trials=4)
    b = gradient_audit(seed=7, trials=4)
    assert a.to_json() == b.to_json()


# ---------------------------------------------------------------- concentration

def test_concentration_degenerate_on_perfectly_aligned_corpus():
    rng = np.random.default_rng(2)
    S = rng.standard_normal((12, 3))
    paired = paired_from_arrays(S, S.copy())
    spec = KernelSpec(gamma=1 / 3)
    result = concentration_experiment(paired,
                                      identity_params(3, log_gamma=np.log(1 / 3)),
                                      [4, 8], repeats=100, k2=spec,
                                      k1_template=spec, loss_batches=10)
    assert result.degenerate
    assert result.deviations == [0.0, 0.0]
    assert result.slope is None
    assert result.loss_exact == 0.0
    assert result.passed


def test_concentration_slope_near_sampling_rate():
    paired, params = make_concentration_corpus()
    result = concentration_experiment(paired, params, [4, 16, 64],
                                      repeats=100, seed=1, loss_batches=150,
                                      loss_batch_size=16)
    assert not result.degenerate
    d0, d1, d2 = result.deviations
    assert d0 > d1 > d2
    assert -0.8 < result.slope < -0.25
    assert result.loss_z < 4.0
    json = result.to_json()
    assert json["audit"] == "concentration"
    assert json["slope_range"] == [-0.65, -0.35]


def test_mean_estimate_deviation_shrinks_with_repeats():
    # unbiasedness: averaging R estimates shrinks the gap to exact as 1/sqrt(R)
    rng = np.random.default_rng(5)
    n, d, m = 24, 6, 8
    paired = paired_from_arrays(rng.standard_normal((n, d)),
                                rng.standard_normal((n, d)))
    params = AdapterParams(0.05 * rng.standard_normal((d, d)),
                           0.05 * rng.standard_normal(d),
                           float(np.log(1.0 / d)), 1.0)
    k2 = KernelSpec(gamma=1.0 / d)
    iu, ju = np.triu_indices(n, k=1)
    all_pairs = PairBatch(pairs=np.stack([iu, ju], axis=1), batch_size=len(iu))
    _, g = alignment_loss_and_grad(params, paired, all_pairs, k2)
    exact = np.concatenate([g.dW.ravel(), g.db, [g.dlog_gamma, g.dcoef0]])

    def mean_deviation(repeats, seed):
        draw = np.random.default_rng(seed)
        acc = np.zeros_like(exact)
        for _ in range(repeats):
            ia = draw.integers(0, n, size=m)
            ib = draw.integers(0, n, size=m)
            clash = ia == ib
            while clash.any():
                ib[clash] = draw.integers(0, n, size=int(clash.sum()))
                clash = ia == ib
            batch = PairBatch(pairs=np.stack([ia, ib], axis=1), batch_size=m)
            _, gb = alignment_loss_and_grad(params, paired, batch, k2)
            acc += np.concatenate([gb.dW.ravel(), gb.db,
                                   [gb.dlog_gamma, gb.dcoef0]])
        return float(np.linalg.norm(acc / repeats - exact))

    ratio = mean_deviation(100, seed=0) / mean_deviation(1600, seed=1)
    assert 2.5 < ratio < 6.5  # ideal sqrt(1600/100) = 4


def test_concentration_input_validation():
    paired, params = make_concentration_corpus()
    with pytest.raises(ValueError, match="repeats must be >= 100"):
        concentration_experiment(paired, params, [4, 16], repeats=50)
    with pytest.raises(ValueError, match="m_values must be increasing"):
        concentration_experiment(paired, params, [16, 4], repeats=100)
    rng = np.random.default_rng(0)
    big = paired_from_arrays(rng.standard_normal((65, 3)),
                             rng.standard_normal((65, 3)))
    with pytest.raises(ValueError, match="n <= 64"):
        concentration_experiment(big, identity_params(3), [4, 16], repeats=100)


# ---------------------------------------------------------------- prop2

def test_prop2_audit_no_violations():
    result = prop2_audit(trials=20_000, seed=0)
    assert result.violations == 0
    assert result.passed
    assert result.trials == 20_000
    assert 0.0 < result.max_ratio <= 1.0 + 1e-9


def test_prop2_audit_stress_rows_hold():
    # 1 in 10 trials shrinks ||f(x)|| to 1e-8 ||x||; the bound still holds
    result = prop2_audit(trials=50, seed=3)
    assert result.violations == 0


def test_prop2_audit_deterministic_given_seed():
    a = prop2_audit(trials=3000, seed=5)
    b = prop2_audit(trials=3000, seed=5)
    assert a.to_json() == b.to_json()


def test_prop2_audit_rejects_zero_trials():
    with pytest.raises(ValueError, match="trials must be >= 1"):
        prop2_audit(trials=0)


# ---------------------------------------------------------------- kernels

def test_kernel_audit_default_specs_pass():
    result = kernel_audit(seed=0)
    assert result.passed
    assert len(result.per_spec) == len(default_audit_specs())
    for entry in result.per_spec:
        assert entry["symmetry_ok"]
        assert entry["range_ok"]
        assert entry["psd_ok"]
        assert entry["symmetry_gap"] <= 1e-12


def test_kernel_audit_gaussian_psd_floor():
    spec = KernelSpec(family="gaussian", gamma=1.0 / 8)
    entry = kernel_audit(specs=[spec], seed=1, n=64, d=8).per_spec[0]
    assert entry["lambda_min"] >= -6.4e-9


def test_kernel_audit_normalized_poly_range():
    spec = KernelSpec(gamma=1.0 / 8, coef0=1.0, degree=3, normalized=True)
    entry = kernel_audit(specs=[spec], seed=2, n=64, d=8).per_spec[0]
    assert entry["range_ok"]


def test_cosine_kernel_orthonormal_rows_psd():
    assert psd_probe(KernelSpec(family="cosine"), np.eye(8)) == pytest.approx(
        1.0, abs=1e-12)


# ---------------------------------------------------------------- run_all

def test_run_all_sections_and_gate():
    report = run_all(seed=0, trials=4, prop2_trials=2000, repeats=100,
                     loss_batches=100)
    assert set(report) == {"gradient", "concentration", "prop2", "kernel",
                           "passed"}
    assert report["passed"]
    assert report["gradient"]["passed"]
    assert report["prop2"]["violations"] == 0


def test_run_all_fails_on_corrupted_gradient():
    report = run_all(seed=0, trials=2, prop2_trials=1000, repeats=100,
                     loss_batches=100, corrupt_block="dcoef0")
    assert not report["passed"]
    assert not report["gradient"]["passed"]
    assert report["prop2"]["passed"]
