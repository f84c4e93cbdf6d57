"""Residual affine adapter: forward maps, drift, KADP serialization."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kalign.adapter import (AdapterError, AdapterParams, drift, forward,
                            forward_batch, identity_params, load_adapter,
                            save_adapter)


def _random_params(rng, d):
    return AdapterParams(W=0.3 * rng.standard_normal((d, d)),
                         b=0.3 * rng.standard_normal(d),
                         log_gamma=float(rng.uniform(-2, 0)),
                         coef0=float(rng.uniform(0, 2)))


def test_identity_forward():
    p = identity_params(4)
    x = np.array([1.0, -2.0, 3.0, 0.5])
    np.testing.assert_array_equal(forward(p, x), x)


def test_bias_only_shift():
    p = AdapterParams(W=np.zeros((3, 3)), b=np.ones(3), log_gamma=0.0,
                      coef0=1.0)
    x = np.array([0.0, 5.0, -1.0])
    np.testing.assert_array_equal(forward(p, x), x + 1.0)


def test_residual_cancellation():
    p = AdapterParams(W=-np.eye(3), b=np.zeros(3), log_gamma=0.0, coef0=1.0)
    np.testing.assert_array_equal(forward(p, np.array([1.0, 2.0, 3.0])),
                                  np.zeros(3))


def test_forward_batch_matches_per_row():
    rng = np.random.default_rng(0)
    p = _random_params(rng, 5)
    X = rng.standard_normal((7, 5))
    out = forward_batch(p, X)
    for i in range(7):
        np.testing.assert_array_equal(out[i], forward(p, X[i]))


def test_forward_batch_loop_oracle():
    rng = np.random.default_rng(1)
    p = _random_params(rng, 8)
    X = rng.standard_normal((16, 8))
    loop = np.empty_like(X)
    for i in range(16):
        for r in range(8):
            loop[i, r] = X[i, r] + float(np.dot(p.W[r], X[i])) + p.b[r]
    np.testing.assert_allclose(forward_batch(p, X), loop, atol=1e-15)


def test_linearity():
    rng = np.random.default_rng(2)
    p = _random_params(rng, 4)
    x, y = rng.standard_normal(4), rng.standard_normal(4)
    a, c = 0.7, -1.3
    lhs = forward(p, a * x + c * y)
    rhs = a * forward(p, x) + c * forward(p, y) + (1 - a - c) * p.b
    np.testing.assert_allclose(lhs, rhs, atol=1e-13)


def test_drift_identity_zero():
    p = identity_params(3)
    X = np.random.default_rng(3).standard_normal((5, 3))
    np.testing.assert_array_equal(drift(p, X), np.zeros(5))


def test_drift_345():
    p = AdapterParams(W=np.zeros((2, 2)), b=np.array([3.0, 4.0]),
                      log_gamma=0.0, coef0=1.0)
    X = np.random.default_rng(4).standard_normal((6, 2))
    np.testing.assert_allclose(drift(p, X), 5.0, atol=1e-14)


def test_drift_matches_recomputation():
    rng = np.random.default_rng(5)
    p = _random_params(rng, 6)
    X = rng.standard_normal((10, 6))
    expect = [np.linalg.norm(p.W @ x + p.b) for x in X]
    np.testing.assert_allclose(drift(p, X), expect, rtol=1e-14)


def test_params_validation():
    with pytest.raises(AdapterError, match="square"):
        AdapterParams(W=np.zeros((2, 3)), b=np.zeros(2), log_gamma=0.0,
                      coef0=1.0)
    with pytest.raises(AdapterError, match="coef0"):
        AdapterParams(W=np.zeros((2, 2)), b=np.zeros(2), log_gamma=0.0,
                      coef0=-0.1)
    with pytest.raises(AdapterError, match="finite"):
        AdapterParams(W=np.full((2, 2), np.nan), b=np.zeros(2),
                      log_gamma=0.0, coef0=1.0)


def test_dimension_mismatch():
    p = identity_params(3)
    with pytest.raises(AdapterError, match="does not match d=3"):
        forward(p, np.ones(4))
    with pytest.raises(AdapterError, match="does not match d=3"):
        forward_batch(p, np.ones((2, 4)))


def test_gamma_property():
    p = identity_params(2, log_gamma=np.log(0.25))
    assert p.gamma == pytest.approx(0.25, rel=1e-15)


@settings(max_examples=40, deadline=None)
@given(d=st.integers(1, 10), seed=st.integers(0, 10_000))
def test_kadp_round_trip(tmp_path_factory, d, seed):
    rng = np.random.default_rng(seed)
    p = _random_params(rng, d)
    path = tmp_path_factory.mktemp("kadp") / "a.kadp"
    save_adapter(path, p)
    back = load_adapter(path)
    np.testing.assert_array_equal(back.W, p.W)
    np.testing.assert_array_equal(back.b, p.b)
    assert back.log_gamma == p.log_gamma and back.coef0 == p.coef0


def test_kadp_header(tmp_path):
    path = tmp_path / "a.kadp"
    save_adapter(path, identity_params(3))
    raw = path.read_bytes()
    assert raw[:4] == b"KADP"
    assert struct.unpack("<I", raw[4:8])[0] == 1
    assert struct.unpack("<Q", raw[8:16])[0] == 3


def test_kadp_corruption_detected(tmp_path):
    path = tmp_path / "a.kadp"
    save_adapter(path, identity_params(3))
    raw = bytearray(path.read_bytes())
    raw[20] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(AdapterError, match="checksum mismatch"):
        load_adapter(path)


def test_kadp_bad_magic(tmp_path):
    path = tmp_path / "a.kadp"
    save_adapter(path, identity_params(2))
    raw = bytearray(path.read_bytes())
    raw[0] = ord("X")
    path.write_bytes(bytes(raw))
    with pytest.raises(AdapterError, match="magic"):
        load_adapter(path)


def test_kadp_truncated(tmp_path):
    path = tmp_path / "a.kadp"
    save_adapter(path, identity_params(4))
    path.write_bytes(path.read_bytes()[:30])
    with pytest.raises(AdapterError, match="truncated"):
        load_adapter(path)
