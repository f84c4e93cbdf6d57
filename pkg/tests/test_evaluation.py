"""Zero-shot, retrieval, probe, discrepancy, drift-bound, and overlap checks."""

import numpy as np
import pytest
import scipy.optimize

from conftest import paired_from_arrays
from kalign.adapter import AdapterParams, identity_params
from kalign.evaluation import (ClassAnchors, EvalError, EvalReport,
                               cosine_drift_report, kernel_discrepancy,
                               linear_probe, linear_probe_multilabel,
                               neighborhood_overlap, retrieval,
                               zero_shot_classify, zero_shot_report)
from kalign.kernels import KernelSpec, default_target_spec
from kalign.objective import alignment_loss
from kalign.store import EmbeddingSet, PairBatch
from kalign.trainer import TrainConfig, train


def _anchors(A, names=None):
    A = np.asarray(A, dtype=np.float64)
    return ClassAnchors(anchors=A, names=names or [f"c{i}" for i in range(len(A))])


# ---------------------------------------------------------------- zero-shot

def test_zero_shot_self_match():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((5, 7))
    preds, acc = zero_shot_classify(A, _anchors(A), labels=np.arange(5))
    assert acc == 1.0
    assert list(preds) == [0, 1, 2, 3, 4]


def test_zero_shot_tie_breaks_to_lowest_class():
    anchors = _anchors(np.eye(3))
    emb = np.array([[1.0, 1.0, 0.0]])  # equidistant from classes 0 and 1
    preds, _ = zero_shot_classify(emb, anchors)
    assert preds[0] == 0


def test_zero_shot_matches_loop_oracle():
    rng = np.random.default_rng(7)
    E = rng.standard_normal((100, 8))
    A = rng.standard_normal((4, 8))
    preds, acc = zero_shot_classify(E, _anchors(A), labels=rng.integers(0, 4, 100))

    expected = []
    for e in E:
        best, best_cos = 0, -np.inf
        for c, a in enumerate(A):
            cos = e @ a / (np.linalg.norm(e) * np.linalg.norm(a))
            if cos > best_cos:
                best, best_cos = c, cos
        expected.append(best)
    assert list(preds) == expected
    assert acc is not None


def test_zero_shot_invariant_to_positive_rescaling():
    rng = np.random.default_rng(3)
    E = rng.standard_normal((40, 6))
    A = rng.standard_normal((3, 6))
    base, _ = zero_shot_classify(E, _anchors(A))
    scaled, _ = zero_shot_classify(E * rng.uniform(0.1, 50.0, size=(40, 1)),
                                   _anchors(A * rng.uniform(0.1, 9.0, size=(3, 1))))
    assert np.array_equal(base, scaled)


def test_zero_shot_rejects_zero_norm_row():
    E = np.array([[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(EvalError, match="zero-norm embedding row 1"):
        zero_shot_classify(E, _anchors(np.eye(2)))


def test_zero_shot_rejects_out_of_range_label():
    with pytest.raises(EvalError, match=r"label outside \[0, C\)"):
        zero_shot_classify(np.eye(2), _anchors(np.eye(2)), labels=np.array([0, 2]))


def test_zero_shot_rejects_dimension_mismatch():
    with pytest.raises(EvalError, match="dimension mismatch"):
        zero_shot_classify(np.eye(3), _anchors(np.eye(2)))


def test_anchor_validation():
    with pytest.raises(EvalError, match="need >= 2 anchor rows"):
        _anchors(np.ones((1, 4)))
    with pytest.raises(EvalError, match="3 names for 2 anchor rows"):
        ClassAnchors(anchors=np.eye(2), names=["a", "b", "c"])
    with pytest.raises(EvalError, match="zero-norm anchor"):
        _anchors(np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(EvalError, match="non-finite anchor"):
        _anchors(np.array([[1.0, 0.0], [np.nan, 1.0]]))


def test_zero_shot_report_per_class():
    anchors = _anchors(np.eye(2), names=["cat", "dog"])
    emb = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    labels = np.array([0, 0, 1, 1])  # last row is a dog misread as cat
    report = zero_shot_report(emb, anchors, labels)
    assert report.metrics["accuracy"] == 0.75
    assert report.per_class == {"cat": 1.0, "dog": 0.5}


# ---------------------------------------------------------------- retrieval

def test_retrieval_identity_gallery():
    rng = np.random.default_rng(1)
    Q = rng.standard_normal((30, 5))
    out = retrieval(Q, Q.copy())
    assert out["recall@1"] == 1.0
    assert out["recall@10"] == 1.0


def test_retrieval_hand_case_with_capped_k():
    queries = np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]])
    gallery = np.array([[0.5, 0.866], [0.0, 1.0], [0.6, 0.8]])
    # query 0: cos to own match 0.5 < 0.6 (gallery row 2), so it ranks 2nd
    out = retrieval(queries, gallery, ks=(1, 2, 5))
    assert out["recall@1"] == 2 / 3
    assert out["recall@2"] == 1.0
    assert out["recall@5"] == 1.0  # K capped at n=3


def test_retrieval_null_matches_fixed_point_fraction():
    # gallery = permuted queries: the designated match ranks first exactly
    # when the permutation fixes i (the query itself is elsewhere otherwise)
    rng = np.random.default_rng(11)
    Q = rng.standard_normal((1000, 16))
    perm = rng.permutation(1000)
    out = retrieval(Q, Q[perm])
    fixed = float(np.mean(perm == np.arange(1000)))
    assert out["recall@1"] == fixed
    assert abs(out["recall@1"] - 1e-3) <= 3 * np.sqrt(1e-3 * 0.999 / 1000)


def test_retrieval_monotone_in_k():
    rng = np.random.default_rng(5)
    Q = rng.standard_normal((50, 4))
    G = Q + 0.8 * rng.standard_normal((50, 4))
    out = retrieval(Q, G, ks=(1, 2, 5, 10, 25, 50))
    values = [out[f"recall@{k}"] for k in (1, 2, 5, 10, 25, 50)]
    assert all(a <= b for a, b in zip(values, values[1:]))
    assert values[-1] == 1.0


def test_retrieval_tie_breaks_by_lower_index():
    queries = np.array([[1.0, 0.0], [0.0, 1.0]])
    gallery = np.array([[1.0, 0.0], [2.0, 0.0]])  # rows 0, 1 tie for query 0
    out = retrieval(queries, gallery, ks=(1,))
    # query 0's match is index 0, the lower of the tied pair: rank 1;
    # query 1 has cosine 0 to both, ties to index 0, its match ranks 2
    assert out["recall@1"] == 0.5


def test_retrieval_input_errors():
    with pytest.raises(EvalError, match="shape mismatch"):
        retrieval(np.eye(3), np.eye(4))
    with pytest.raises(EvalError, match="K values must be >= 1"):
        retrieval(np.eye(3), np.eye(3), ks=(0, 5))
    with pytest.raises(EvalError, match="zero-norm query row"):
        retrieval(np.zeros((2, 2)), np.eye(2))


# ---------------------------------------------------------------- probe

def _labeled(X, y):
    return EmbeddingSet(data=np.asarray(X, dtype=np.float64),
                        labels=np.asarray(y, dtype=np.int64))


def test_probe_separable_two_class():
    rng = np.random.default_rng(2)
    def corpus(n):
        y = rng.integers(0, 2, n)
        X = np.column_stack([(2 * y - 1) * 3.0 + 0.3 * rng.standard_normal(n),
                             rng.standard_normal(n)])
        return _labeled(X, y)
    result = linear_probe(corpus(60), corpus(40), l2=0.0)
    assert result.accuracy == 1.0
    # separable + l2=0 has no finite optimum; the cap must be reported
    assert result.converged or result.steps == 10_000


def test_probe_permutation_null():
    rng = np.random.default_rng(9)
    X_train = rng.standard_normal((200, 8))
    X_test = rng.standard_normal((400, 8))
    y_train = rng.permutation(np.repeat(np.arange(4), 50))
    y_test = rng.permutation(np.repeat(np.arange(4), 100))
    result = linear_probe(_labeled(X_train, y_train), _labeled(X_test, y_test))
    sigma = np.sqrt(0.25 * 0.75 / 400)
    assert abs(result.accuracy - 0.25) <= 3 * sigma


def test_probe_matches_lbfgs_oracle():
    rng = np.random.default_rng(17)
    C, d, l2 = 3, 4, 1e-2
    centers = rng.standard_normal((C, d)) * 2.0
    def corpus(n):
        y = rng.integers(0, C, n)
        return _labeled(centers[y] + rng.standard_normal((n, d)), y)
    train_set, test_set = corpus(90), corpus(60)
    result = linear_probe(train_set, test_set, l2=l2)

    # second implementation: L-BFGS on the identical objective
    X = np.hstack([train_set.data, np.ones((train_set.n, 1))])
    Y = np.zeros((train_set.n, C))
    Y[np.arange(train_set.n), train_set.labels] = 1.0

    def f(theta_flat):
        theta = theta_flat.reshape(d + 1, C)
        Z = X @ theta
        Z -= Z.max(axis=1, keepdims=True)
        log_p = Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))
        ce = -np.mean((Y * log_p).sum(axis=1))
        return ce + 0.5 * l2 * np.sum(theta ** 2)

    opt = scipy.optimize.minimize(f, np.zeros((d + 1) * C), method="L-BFGS-B",
                                  options={"maxiter": 2000, "ftol": 1e-14})
    theta = opt.x.reshape(d + 1, C)
    Xt = np.hstack([test_set.data, np.ones((test_set.n, 1))])
    oracle_acc = float(np.mean(np.argmax(Xt @ theta, axis=1) == test_set.labels))
    assert result.accuracy == oracle_acc


def test_probe_rejects_single_class():
    with pytest.raises(EvalError, match="single-class training set"):
        linear_probe(_labeled(np.eye(3), [1, 1, 1]), _labeled(np.eye(3), [0, 1, 2]))


def test_probe_requires_labels():
    unlabeled = EmbeddingSet(data=np.eye(3))
    with pytest.raises(EvalError, match="labeled"):
        linear_probe(unlabeled, _labeled(np.eye(3), [0, 1, 2]))


def test_probe_reports_non_convergence():
    rng = np.random.default_rng(4)
    data = _labeled(rng.standard_normal((50, 3)), rng.integers(0, 2, 50))
    result = linear_probe(data, data, max_steps=2)
    assert not result.converged
    assert result.steps == 2
    assert result.grad_norm > 1e-6


def test_probe_accepts_non_contiguous_labels():
    rng = np.random.default_rng(6)
    y = np.where(rng.integers(0, 2, 80) == 0, 3, 11)
    X = np.column_stack([np.where(y == 3, -2.0, 2.0) + 0.1 * rng.standard_normal(80),
                         rng.standard_normal(80)])
    result = linear_probe(_labeled(X, y), _labeled(X, y), l2=0.0)
    assert result.accuracy == 1.0


def test_multilabel_probe_learns_independent_bits():
    rng = np.random.default_rng(13)
    def corpus(n):
        Y = rng.integers(0, 2, (n, 2)).astype(float)
        X = (2 * Y - 1) * 2.0 + 0.2 * rng.standard_normal((n, 2))
        return X, Y
    X_train, Y_train = corpus(80)
    X_test, Y_test = corpus(50)
    result = linear_probe_multilabel(X_train, Y_train, X_test, Y_test, l2=1e-4)
    assert result.accuracy == 1.0


def test_multilabel_probe_rejects_shape_mismatch():
    with pytest.raises(EvalError, match="label matrix shape"):
        linear_probe_multilabel(np.eye(3), np.zeros((4, 2)), np.eye(3),
                                np.zeros((3, 2)))


# ---------------------------------------------------------------- discrepancy

def _all_pairs(n):
    pairs = np.column_stack(np.triu_indices(n, k=1))
    return PairBatch(pairs=pairs, batch_size=len(pairs))


def test_discrepancy_zero_when_aligned():
    rng = np.random.default_rng(21)
    S = rng.standard_normal((40, 6))
    paired = paired_from_arrays(S, S.copy())
    spec = KernelSpec(gamma=0.25)
    out = kernel_discrepancy(paired, identity_params(6, log_gamma=np.log(0.25)),
                             spec, spec)
    assert out.value == 0.0
    assert out.mode == "exact"
    assert out.standard_error is None


def test_discrepancy_exact_equals_alignment_loss_over_all_pairs():
    rng = np.random.default_rng(22)
    n = 24
    paired = paired_from_arrays(rng.standard_normal((n, 5)),
                                rng.standard_normal((n, 7)))
    params = AdapterParams(0.1 * rng.standard_normal((5, 5)),
                           0.1 * rng.standard_normal(5), np.log(0.2), 0.8)
    k1 = KernelSpec(gamma=params.gamma, coef0=params.coef0)
    k2 = default_target_spec(7)
    exact = kernel_discrepancy(paired, params, k1, k2, mode="exact")
    loss = alignment_loss(params, paired, _all_pairs(n), k1, k2)
    assert exact.value == pytest.approx(loss, rel=1e-12)


def test_discrepancy_sampled_agrees_with_exact():
    rng = np.random.default_rng(23)
    n = 64
    paired = paired_from_arrays(rng.standard_normal((n, 4)),
                                rng.standard_normal((n, 4)))
    params = identity_params(4, log_gamma=np.log(0.25))
    k1 = KernelSpec(gamma=0.25)
    k2 = default_target_spec(4)
    exact = kernel_discrepancy(paired, params, k1, k2).value

    values = []
    for seed in range(100):
        out = kernel_discrepancy(paired, params, k1, k2, sample_pairs=1000,
                                 seed=seed, mode="sampled")
        assert out.mode == "sampled"
        assert out.standard_error > 0
        values.append(out.value)
    se_mean = np.std(values, ddof=1) / np.sqrt(len(values))
    assert abs(np.mean(values) - exact) <= 3 * se_mean


def test_discrepancy_drops_after_training(synthetic_paired):
    d = synthetic_paired.source.d
    before_params = identity_params(d, log_gamma=np.log(1.0 / d))
    k2 = default_target_spec(synthetic_paired.target.d)
    before = kernel_discrepancy(synthetic_paired, before_params,
                                KernelSpec(gamma=1.0 / d), k2)
    rep = train(synthetic_paired, TrainConfig(epochs=30, batch_size=64,
                                              warmup_steps=10, seed=3))
    p = rep.final_params
    after = kernel_discrepancy(synthetic_paired, p,
                               KernelSpec(gamma=p.gamma, coef0=p.coef0), k2)
    assert after.value < before.value


def test_discrepancy_mode_validation():
    rng = np.random.default_rng(24)
    paired = paired_from_arrays(rng.standard_normal((8, 3)),
                                rng.standard_normal((8, 3)))
    params = identity_params(3)
    spec = KernelSpec(gamma=1 / 3)
    with pytest.raises(EvalError, match="unknown mode"):
        kernel_discrepancy(paired, params, spec, spec, mode="both")
    big = paired_from_arrays(np.ones((4097, 2)), np.ones((4097, 2)))
    with pytest.raises(EvalError, match="exact mode needs n <= 4096"):
        kernel_discrepancy(big, identity_params(2), spec, spec, mode="exact")


# ---------------------------------------------------------------- drift bound

def test_drift_report_identity_params():
    rng = np.random.default_rng(31)
    X = rng.standard_normal((12, 4))
    anchors = _anchors(rng.standard_normal((3, 4)))
    report = cosine_drift_report(identity_params(4), EmbeddingSet(data=X), anchors)
    assert np.all(report.lam == 0.0)
    assert np.all(report.actual == 0.0)
    assert np.all(report.bound == 0.0)
    assert report.ok.all()
    assert report.n_violations == 0
    assert report.max_cosine_change == 0.0


def test_drift_report_hand_shift_case():
    # x = e1, b = 0.75 e2: f(x) = (1, 0.75, 0), ||f(x)|| = 1.25, lambda = 0.75
    params = AdapterParams(np.zeros((3, 3)), np.array([0.0, 0.75, 0.0]), 0.0, 1.0)
    source = EmbeddingSet(data=np.array([[1.0, 0.0, 0.0]]))
    anchors = _anchors(np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]))
    report = cosine_drift_report(params, source, anchors)
    assert report.lam[0] == 0.75
    assert report.bound[0] == pytest.approx(2 * 0.75 / 1.25, abs=1e-15)
    # cos vs e2 anchor goes 0 -> 0.6; cos vs e1 anchor goes 1 -> 0.8
    assert report.actual[0, 0] == pytest.approx(0.6, abs=1e-15)
    assert report.actual[0, 1] == pytest.approx(0.2, abs=1e-15)
    assert report.ok.all()


def test_drift_bound_monte_carlo():
    rng = np.random.default_rng(32)
    anchors = _anchors(rng.standard_normal((8, 5)))
    for _ in range(60):
        params = AdapterParams(0.5 * rng.standard_normal((5, 5)),
                               0.5 * rng.standard_normal(5), 0.0, 1.0)
        X = rng.standard_normal((40, 5))
        report = cosine_drift_report(params, EmbeddingSet(data=X), anchors)
        assert report.n_violations == 0


def test_drift_report_rejects_zero_norm_rows():
    anchors = _anchors(np.eye(2))
    with pytest.raises(EvalError, match="zero-norm source row 1"):
        cosine_drift_report(identity_params(2),
                            EmbeddingSet(data=np.array([[1.0, 0.0], [0.0, 0.0]])),
                            anchors)
    # W = 0, b = -e1 maps e1 to the origin
    params = AdapterParams(np.zeros((2, 2)), np.array([-1.0, 0.0]), 0.0, 1.0)
    with pytest.raises(EvalError, match="zero-norm adapted row 0"):
        cosine_drift_report(params, EmbeddingSet(data=np.array([[1.0, 0.0]])),
                            anchors)


# ---------------------------------------------------------------- overlap

def test_overlap_identical_matrices():
    rng = np.random.default_rng(41)
    A = rng.standard_normal((20, 3))
    K = A @ A.T
    assert neighborhood_overlap(K, K.copy(), k=5) == 1.0


def test_overlap_hand_cases():
    K1 = np.array([[1.0, 0.9, 0.1], [0.9, 1.0, 0.2], [0.1, 0.2, 1.0]])
    K2 = np.array([[1.0, 0.1, 0.9], [0.1, 1.0, 0.2], [0.9, 0.2, 1.0]])
    # k=1 neighbors: K1 gives (1, 0, 1), K2 gives (2, 2, 0): disjoint
    assert neighborhood_overlap(K1, K2, k=1) == 0.0

    K3 = np.array([[9.0, 3.0, 2.0, 1.0],
                   [3.0, 9.0, 2.0, 1.0],
                   [1.0, 2.0, 9.0, 3.0],
                   [1.0, 2.0, 3.0, 9.0]])
    K4 = np.array([[9.0, 3.0, 1.0, 2.0],
                   [3.0, 9.0, 1.0, 2.0],
                   [2.0, 1.0, 9.0, 3.0],
                   [2.0, 1.0, 3.0, 9.0]])
    # top-2 sets share exactly one index per row
    assert neighborhood_overlap(K3, K4, k=2) == 0.5


def test_overlap_ties_break_to_lower_index():
    K1 = np.array([[1.0, 0.5, 0.5], [0.5, 1.0, 0.5], [0.5, 0.5, 1.0]])
    K2 = np.array([[1.0, 0.4, 0.6], [0.4, 1.0, 0.6], [0.6, 0.6, 1.0]])
    # K1 row 0 ties cols 1, 2 at 0.5: stable sort keeps col 1
    assert neighborhood_overlap(K1, K2, k=1) == pytest.approx(1 / 3)


def test_overlap_input_validation():
    with pytest.raises(EvalError, match="matching square matrices"):
        neighborhood_overlap(np.eye(3), np.eye(4))
    with pytest.raises(EvalError, match="need 1 <= k < n"):
        neighborhood_overlap(np.eye(3), np.eye(3), k=3)


# ---------------------------------------------------------------- report

def test_eval_report_serialization():
    report = EvalReport(metrics={"accuracy": 0.75, "recall@1": 0.5},
                        per_class={"dog": 0.5, "cat": 1.0},
                        config={"l2": 1e-3})
    assert report.to_json() == {"metrics": {"accuracy": 0.75, "recall@1": 0.5},
                                "per_class": {"dog": 0.5, "cat": 1.0},
                                "config": {"l2": 1e-3}}
    assert report.to_csv() == ("metric,value\n"
                               "accuracy,0.75\n"
                               "recall@1,0.5\n"
                               "class:cat,1.0\n"
                               "class:dog,0.5\n")
