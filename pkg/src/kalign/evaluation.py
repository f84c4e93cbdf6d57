"""Evaluation protocols over cached embeddings.

Zero-shot classification against class anchors, bidirectional retrieval,
linear probing, kernel discrepancy, cosine-drift bound reporting, and a
kernel-neighborhood overlap diagnostic. All ranking ties break toward
the lower index so results are deterministic under duplicated vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapter import AdapterParams, drift, forward_batch
from .kernels import KernelSpec, kernel_matrix
from .objective import pair_values
from .store import EmbeddingSet, PairedEmbeddings


class EvalError(ValueError):
    """Invalid inputs to an evaluation protocol."""


@dataclass
class ClassAnchors:
    """One reference embedding per class (e.g. text-prompt embeddings)."""
    anchors: np.ndarray
    names: list[str]

    def __post_init__(self) -> None:
        self.anchors = np.ascontiguousarray(self.anchors, dtype=np.float64)
        if self.anchors.ndim != 2 or self.anchors.shape[0] < 2:
            raise EvalError(f"need >= 2 anchor rows, got shape {self.anchors.shape}")
        if len(self.names) != self.anchors.shape[0]:
            raise EvalError(f"{len(self.names)} names for "
                            f"{self.anchors.shape[0]} anchor rows")
        if not np.isfinite(self.anchors).all():
            raise EvalError("non-finite anchor row")
        if (np.linalg.norm(self.anchors, axis=1) == 0).any():
            raise EvalError("zero-norm anchor row")

    @property
    def n_classes(self) -> int:
        return self.anchors.shape[0]


@dataclass
class EvalReport:
    metrics: dict
    per_class: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"metrics": self.metrics, "per_class": self.per_class,
                "config": self.config}

    def to_csv(self) -> str:
        lines = ["metric,value"]
        for key in sorted(self.metrics):
            lines.append(f"{key},{self.metrics[key]}")
        for key in sorted(self.per_class):
            lines.append(f"class:{key},{self.per_class[key]}")
        return "\n".join(lines) + "\n"


def _unit_rows(X: np.ndarray, what: str) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1)
    if (norms == 0).any():
        raise EvalError(f"zero-norm {what} row {int(np.argmax(norms == 0))}")
    return X / norms[:, None]


def zero_shot_classify(embeddings: np.ndarray, anchors: ClassAnchors,
                       labels: np.ndarray | None = None):
    """Cosine argmax against anchors; ties go to the lowest class index.

    Returns (predictions, accuracy) with accuracy None when labels are
    not given.
    """
    E = _unit_rows(embeddings, "embedding")
    A = _unit_rows(anchors.anchors, "anchor")
    if E.shape[1] != A.shape[1]:
        raise EvalError(f"dimension mismatch: {E.shape[1]} vs {A.shape[1]}")
    scores = E @ A.T
    preds = np.argmax(scores, axis=1)
    accuracy = None
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (E.shape[0],):
            raise EvalError(f"labels shape {labels.shape} does not match n={E.shape[0]}")
        if labels.min() < 0 or labels.max() >= anchors.n_classes:
            raise EvalError("label outside [0, C)")
        accuracy = float(np.mean(preds == labels))
    return preds, accuracy


def zero_shot_report(embeddings: np.ndarray, anchors: ClassAnchors,
                     labels: np.ndarray) -> EvalReport:
    preds, accuracy = zero_shot_classify(embeddings, anchors, labels)
    labels = np.asarray(labels, dtype=np.int64)
    per_class = {}
    for c, name in enumerate(anchors.names):
        mask = labels == c
        if mask.any():
            per_class[name] = float(np.mean(preds[mask] == c))
    return EvalReport(metrics={"accuracy": accuracy}, per_class=per_class)


def retrieval(queries: np.ndarray, gallery: np.ndarray,
              ks: tuple = (1, 5, 10)) -> dict:
    """R@K with gallery row i as the true match of query i.

    K values above the gallery size are capped at n, so R@K is 1.0 there.
    """
    Q = _unit_rows(queries, "query")
    G = _unit_rows(gallery, "gallery")
    if Q.shape != G.shape:
        raise EvalError(f"shape mismatch: {Q.shape} vs {G.shape}")
    if min(ks) < 1:
        raise EvalError(f"K values must be >= 1, got {min(ks)}")
    n = Q.shape[0]
    scores = Q @ G.T
    true_scores = np.diagonal(scores)
    # rank = 1 + #{better} + #{equal at lower index}; ties break low
    better = (scores > true_scores[:, None]).sum(axis=1)
    idx = np.arange(n)
    tied_lower = ((scores == true_scores[:, None]) & (idx[None, :] < idx[:, None])).sum(axis=1)
    ranks = 1 + better + tied_lower
    return {f"recall@{k}": float(np.mean(ranks <= min(k, n))) for k in ks}


def _softmax(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


@dataclass
class ProbeResult:
    accuracy: float
    converged: bool
    steps: int
    grad_norm: float


def _gd_minimize(grad_fn, Wb_shape, lipschitz: float, tol: float, max_steps: int):
    """Plain full-batch gradient descent with a 1/L step."""
    theta = np.zeros(Wb_shape)
    step = 1.0 / lipschitz
    gnorm = np.inf
    for it in range(1, max_steps + 1):
        g = grad_fn(theta)
        gnorm = float(np.linalg.norm(g))
        if gnorm < tol:
            return theta, True, it, gnorm
        theta -= step * g
    return theta, False, max_steps, gnorm


def linear_probe(train: EmbeddingSet, test: EmbeddingSet, l2: float = 1e-3,
                 tol: float = 1e-6, max_steps: int = 10_000) -> ProbeResult:
    """Multinomial logistic probe on frozen embeddings, full-batch GD."""
    if train.labels is None or test.labels is None:
        raise EvalError("probe requires labeled train and test sets")
    if l2 < 0:
        raise EvalError(f"l2 must be >= 0, got {l2}")
    classes = np.unique(train.labels)
    if len(classes) < 2:
        raise EvalError("single-class training set")
    remap = {c: i for i, c in enumerate(classes)}
    y = np.array([remap[c] for c in train.labels])
    X = np.hstack([train.data, np.ones((train.n, 1))])
    n, d1 = X.shape
    C = len(classes)
    Y = np.zeros((n, C))
    Y[np.arange(n), y] = 1.0

    def grad_fn(theta):
        P = _softmax(X @ theta)
        return X.T @ (P - Y) / n + l2 * theta

    # softmax cross-entropy gradient is Lipschitz with constant
    # <= 0.5 * sigma_max(X)^2 / n + l2
    smax = np.linalg.norm(X, ord=2)
    theta, converged, steps, gnorm = _gd_minimize(
        grad_fn, (d1, C), 0.5 * smax ** 2 / n + max(l2, 1e-12), tol, max_steps)

    Xt = np.hstack([test.data, np.ones((test.n, 1))])
    preds = classes[np.argmax(Xt @ theta, axis=1)]
    accuracy = float(np.mean(preds == test.labels))
    return ProbeResult(accuracy=accuracy, converged=converged, steps=steps,
                       grad_norm=gnorm)


def linear_probe_multilabel(train_X: np.ndarray, train_Y: np.ndarray,
                            test_X: np.ndarray, test_Y: np.ndarray,
                            l2: float = 1e-3, tol: float = 1e-6,
                            max_steps: int = 10_000) -> ProbeResult:
    """Union-of-labels variant: independent binary cross-entropy per class.

    Y matrices are n x C in {0, 1}; accuracy is exact-match of the 0.5
    threshold prediction averaged over entries.
    """
    train_X = np.asarray(train_X, dtype=np.float64)
    train_Y = np.asarray(train_Y, dtype=np.float64)
    if train_Y.ndim != 2 or train_Y.shape[0] != train_X.shape[0]:
        raise EvalError(f"label matrix shape {train_Y.shape} does not match "
                        f"X {train_X.shape}")
    X = np.hstack([train_X, np.ones((train_X.shape[0], 1))])
    n = X.shape[0]

    def grad_fn(theta):
        P = 1.0 / (1.0 + np.exp(-(X @ theta)))
        return X.T @ (P - train_Y) / n + l2 * theta

    smax = np.linalg.norm(X, ord=2)
    theta, converged, steps, gnorm = _gd_minimize(
        grad_fn, (X.shape[1], train_Y.shape[1]),
        0.25 * smax ** 2 / n + max(l2, 1e-12), tol, max_steps)

    Xt = np.hstack([np.asarray(test_X, dtype=np.float64),
                    np.ones((len(test_X), 1))])
    pred = (Xt @ theta) > 0
    accuracy = float(np.mean(pred == (np.asarray(test_Y) > 0.5)))
    return ProbeResult(accuracy=accuracy, converged=converged, steps=steps,
                       grad_norm=gnorm)


@dataclass
class DiscrepancyResult:
    value: float
    standard_error: float | None
    mode: str  # "exact" or "sampled"


def kernel_discrepancy(paired: PairedEmbeddings, params: AdapterParams,
                       k1: KernelSpec, k2: KernelSpec,
                       sample_pairs: int = 200_000,
                       seed: int = 0, mode: str = "auto") -> DiscrepancyResult:
    """Mean squared kernel gap: exact all-pairs up to n = 4096, else sampled.

    mode forces "exact" or "sampled"; "auto" picks by corpus size.
    """
    if mode not in ("auto", "exact", "sampled"):
        raise EvalError(f"unknown mode {mode!r}")
    n = paired.n
    U = forward_batch(params, paired.source.data)
    G = paired.target.data
    if mode == "exact" and n > 4096:
        raise EvalError(f"exact mode needs n <= 4096, got {n}")
    if mode != "sampled" and n <= 4096:
        K1 = kernel_matrix(k1, U)
        K2 = kernel_matrix(k2, G)
        iu = np.triu_indices(n, k=1)
        gaps = (K1[iu] - K2[iu]) ** 2
        return DiscrepancyResult(value=float(np.mean(gaps)),
                                 standard_error=None, mode="exact")
    rng = np.random.default_rng(seed)
    ia = rng.integers(0, n, size=sample_pairs)
    ib = rng.integers(0, n, size=sample_pairs)
    clash = ia == ib
    while clash.any():
        ib[clash] = rng.integers(0, n, size=int(clash.sum()))
        clash = ia == ib
    gaps = (pair_values(k1, U[ia], U[ib]) - pair_values(k2, G[ia], G[ib])) ** 2
    se = float(np.std(gaps, ddof=1) / np.sqrt(sample_pairs))
    return DiscrepancyResult(value=float(np.mean(gaps)), standard_error=se,
                             mode="sampled")


@dataclass
class DriftReport:
    """Per-sample drift, per-(sample, anchor) cosine change, and the bound."""
    lam: np.ndarray          # n
    actual: np.ndarray       # n x C, |cos(x, a) - cos(f(x), a)|
    bound: np.ndarray        # n, 2*lam / max(||f(x)||, ||x||)
    ok: np.ndarray           # n x C bools, actual <= bound + 1e-12

    @property
    def n_violations(self) -> int:
        return int((~self.ok).sum())

    @property
    def max_cosine_change(self) -> float:
        return float(self.actual.max())


def cosine_drift_report(params: AdapterParams, source: EmbeddingSet,
                        anchors: ClassAnchors) -> DriftReport:
    """Actual anchor-cosine changes against the 2*lambda/max-norm bound."""
    X = source.data
    U = forward_batch(params, X)
    nx = np.linalg.norm(X, axis=1)
    nu = np.linalg.norm(U, axis=1)
    if (nx == 0).any():
        raise EvalError(f"zero-norm source row {int(np.argmax(nx == 0))}")
    if (nu == 0).any():
        raise EvalError(f"zero-norm adapted row {int(np.argmax(nu == 0))}")
    A = _unit_rows(anchors.anchors, "anchor")
    if A.shape[1] != X.shape[1]:
        raise EvalError(f"dimension mismatch: {A.shape[1]} vs {X.shape[1]}")
    cos_x = (X / nx[:, None]) @ A.T
    cos_u = (U / nu[:, None]) @ A.T
    lam = drift(params, X)
    actual = np.abs(cos_x - cos_u)
    bound = 2.0 * lam / np.maximum(nx, nu)
    ok = actual <= bound[:, None] + 1e-12
    return DriftReport(lam=lam, actual=actual, bound=bound, ok=ok)


def neighborhood_overlap(K1: np.ndarray, K2: np.ndarray, k: int = 10) -> float:
    """Mean fraction of shared k-nearest neighbors under two kernel matrices.

    Self-similarity is excluded; ties break toward the lower index.
    """
    K1 = np.asarray(K1, dtype=np.float64)
    K2 = np.asarray(K2, dtype=np.float64)
    n = K1.shape[0]
    if K1.shape != (n, n) or K2.shape != (n, n):
        raise EvalError(f"need matching square matrices, got {K1.shape} and {K2.shape}")
    if not 1 <= k < n:
        raise EvalError(f"need 1 <= k < n, got k={k}, n={n}")
    total = 0.0
    for i in range(n):
        s1 = K1[i].copy()
        s2 = K2[i].copy()
        s1[i] = -np.inf
        s2[i] = -np.inf
        n1 = set(np.argsort(-s1, kind="stable")[:k])
        n2 = set(np.argsort(-s2, kind="stable")[:k])
        total += len(n1 & n2) / k
    return total / n
