"""Alignment and regularization losses with exact hand-derived gradients.

The combined objective over a pair batch is

    total = w * mean_pairs (k1(f(x_i), f(x_j)) - k2(g_i, g_j))^2
          + mean_rows ||f(x_r) - x_r||^2

with w on the alignment term. The feature-space baseline objective puts w
on the feature-matching term instead; both satisfy the same decomposition
total = w * alignment + regularization.

Gradients are analytic (no autodiff). The default normalized-polynomial
source kernel is evaluated through the _core backend; other families take
a vectorized numpy path.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import _core
from .adapter import AdapterParams, forward_batch
from .kernels import KernelSpec, KernelError, _ipow
from .store import EmbeddingSet, PairBatch, PairedEmbeddings


class ObjectiveError(ValueError):
    """Invalid inputs or a non-finite result in a loss/gradient evaluation."""


@dataclass
class LossBreakdown:
    alignment: float
    regularization: float
    total: float
    w: float

    def __post_init__(self) -> None:
        if not self.w > 0:
            raise ObjectiveError(f"w must be > 0, got {self.w}")


@dataclass
class GradientBundle:
    dW: np.ndarray
    db: np.ndarray
    dlog_gamma: float
    dcoef0: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.dW).all() and np.isfinite(self.db).all()
                and np.isfinite(self.dlog_gamma)
                and np.isfinite(self.dcoef0)):
            raise ObjectiveError("non-finite gradient bundle")


@dataclass
class FeatureGradients:
    dW: np.ndarray
    db: np.ndarray
    dR: np.ndarray

    def __post_init__(self) -> None:
        if not (np.isfinite(self.dW).all() and np.isfinite(self.db).all()
                and np.isfinite(self.dR).all()):
            raise ObjectiveError("non-finite gradient bundle")


def k1_from_params(template: KernelSpec, params: AdapterParams) -> KernelSpec:
    """Template spec with the trainable fields (gamma, coef0) taken from params."""
    return dataclasses.replace(template, gamma=params.gamma, coef0=params.coef0)


def pair_values(spec: KernelSpec, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """k(A[i], B[i]) for each row i, any family."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise ObjectiveError(f"shape mismatch: {A.shape} vs {B.shape}")
    if spec.family == "polynomial":
        a_ij = spec.gamma * np.einsum("ij,ij->i", A, B) + spec.coef0
        k = _ipow(a_ij, spec.degree)
        if not spec.normalized:
            return k
        a_ii = spec.gamma * np.einsum("ij,ij->i", A, A) + spec.coef0
        a_jj = spec.gamma * np.einsum("ij,ij->i", B, B) + spec.coef0
        bad = (a_ii <= 0) | (a_jj <= 0)
        if bad.any():
            raise KernelError(f"pair {int(np.argmax(bad))}: normalized "
                              "polynomial undefined: k(x,x) <= 0")
        return k / np.sqrt(_ipow(a_ii, spec.degree) * _ipow(a_jj, spec.degree))
    if spec.family == "gaussian":
        diff = A - B
        return np.exp(-spec.gamma * np.einsum("ij,ij->i", diff, diff))
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    bad = (na == 0) | (nb == 0)
    if bad.any():
        raise KernelError(f"pair {int(np.argmax(bad))}: cosine kernel "
                          "undefined for zero-norm input")
    return np.einsum("ij,ij->i", A, B) / (na * nb)


def _gather_slots(paired: PairedEmbeddings, batch: PairBatch):
    """Batch rows laid out as 2B slots: first elements then second elements."""
    rows = np.concatenate([batch.pairs[:, 0], batch.pairs[:, 1]])
    B = batch.batch_size
    ia = np.arange(B, dtype=np.int64)
    ib = np.arange(B, 2 * B, dtype=np.int64)
    return rows, ia, ib


def alignment_loss(params: AdapterParams, paired: PairedEmbeddings,
                   batch: PairBatch, k1: KernelSpec, k2: KernelSpec) -> float:
    """Mean squared kernel gap over the batch pairs."""
    ia_g, ib_g = batch.pairs[:, 0], batch.pairs[:, 1]
    U = forward_batch(params, paired.source.data[np.concatenate([ia_g, ib_g])])
    B = batch.batch_size
    k1v = pair_values(k1, U[:B], U[B:])
    k2v = pair_values(k2, paired.target.data[ia_g], paired.target.data[ib_g])
    return float(np.mean((k1v - k2v) ** 2))


def regularization_loss(params: AdapterParams, source: EmbeddingSet,
                        rows: np.ndarray) -> float:
    """Mean squared drift over the given source rows."""
    rows = np.asarray(rows, dtype=np.int64)
    X = source.data[rows]
    Q = X @ params.W.T + params.b
    return float(np.mean(np.einsum("ij,ij->i", Q, Q)))


def _align_grad_general(spec: KernelSpec, U, ia, ib, k2v):
    """Loss + gradients wrt U and (gamma, coef0) for non-default k1 families."""
    ui, uj = U[ia], U[ib]
    B = len(ia)
    scale = 2.0 / B
    dU = np.zeros_like(U)
    if spec.family == "gaussian":
        diff = ui - uj
        sq = np.einsum("ij,ij->i", diff, diff)
        k1v = np.exp(-spec.gamma * sq)
        r = k1v - k2v
        coef = scale * r * k1v
        dd = (-2.0 * spec.gamma) * coef[:, None] * diff
        np.add.at(dU, ia, dd)
        np.add.at(dU, ib, -dd)
        dgamma = float(np.sum(coef * (-sq)))
        return float(np.mean(r * r)), dU, dgamma, 0.0
    if spec.family == "cosine":
        ni = np.linalg.norm(ui, axis=1)
        nj = np.linalg.norm(uj, axis=1)
        bad = (ni == 0) | (nj == 0)
        if bad.any():
            raise KernelError(f"pair {int(np.argmax(bad))}: cosine kernel "
                              "undefined for zero-norm input")
        k1v = np.einsum("ij,ij->i", ui, uj) / (ni * nj)
        r = k1v - k2v
        coef = scale * r
        dui = coef[:, None] * (uj / (ni * nj)[:, None]
                               - (k1v / ni ** 2)[:, None] * ui)
        duj = coef[:, None] * (ui / (ni * nj)[:, None]
                               - (k1v / nj ** 2)[:, None] * uj)
        np.add.at(dU, ia, dui)
        np.add.at(dU, ib, duj)
        return float(np.mean(r * r)), dU, 0.0, 0.0
    # unnormalized polynomial
    s_ij = np.einsum("ij,ij->i", ui, uj)
    a_ij = spec.gamma * s_ij + spec.coef0
    p = spec.degree
    am1 = _ipow(a_ij, p - 1)
    k1v = am1 * a_ij
    r = k1v - k2v
    coef = scale * r * p * am1
    np.add.at(dU, ia, (spec.gamma * coef)[:, None] * uj)
    np.add.at(dU, ib, (spec.gamma * coef)[:, None] * ui)
    dgamma = float(np.sum(coef * s_ij))
    dcoef0 = float(np.sum(coef))
    return float(np.mean(r * r)), dU, dgamma, dcoef0


def _align_pieces(params: AdapterParams, paired: PairedEmbeddings,
                  batch: PairBatch, k2: KernelSpec,
                  k1_template: KernelSpec | None):
    """Shared alignment-loss machinery: slot gather + backend dispatch."""
    k1 = k1_from_params(k1_template if k1_template is not None else k2, params)
    rows, ia, ib = _gather_slots(paired, batch)
    X = paired.source.data[rows]
    U = forward_batch(params, X)
    ia_g, ib_g = batch.pairs[:, 0], batch.pairs[:, 1]
    k2v = pair_values(k2, paired.target.data[ia_g], paired.target.data[ib_g])
    if k1.family == "polynomial" and k1.normalized:
        align, dU, dgamma, dcoef0 = _core.norm_poly_pair_pass(
            U, k2v, ia, ib, k1.gamma, k1.coef0, k1.degree)
    else:
        align, dU, dgamma, dcoef0 = _align_grad_general(k1, U, ia, ib, k2v)
    return align, dU, k1.gamma * dgamma, dcoef0, X, U


def alignment_loss_and_grad(params: AdapterParams, paired: PairedEmbeddings,
                            batch: PairBatch, k2: KernelSpec,
                            k1_template: KernelSpec | None = None,
                            ) -> tuple[float, GradientBundle]:
    """Alignment term alone with its exact gradient (no w, no regularizer).

    This is the stochastic estimator whose concentration the verify
    module measures.
    """
    align, dU, dlg, dc0, X, _ = _align_pieces(params, paired, batch, k2,
                                              k1_template)
    dW = np.einsum("ij,ik->jk", dU, X)
    db = dU.sum(axis=0)
    return align, GradientBundle(dW=dW, db=db, dlog_gamma=float(dlg),
                                 dcoef0=float(dc0))


def total_loss_and_grad(params: AdapterParams, paired: PairedEmbeddings,
                        batch: PairBatch, w: float, k2: KernelSpec,
                        k1_template: KernelSpec | None = None,
                        ) -> tuple[LossBreakdown, GradientBundle]:
    """Combined loss and its exact gradient over one pair batch.

    k1 takes family/degree/normalized from k1_template (default: from k2)
    and gamma/coef0 from params. The regularizer is averaged over the 2B
    rows the batch touches.
    """
    if not w > 0:
        raise ObjectiveError(f"w must be > 0, got {w}")
    align, dU, dlg, dc0, X, U = _align_pieces(params, paired, batch, k2,
                                              k1_template)
    m = X.shape[0]
    Q = U - X
    reg = float(np.mean(np.einsum("ij,ij->i", Q, Q)))
    dW = w * np.einsum("ij,ik->jk", dU, X) + (2.0 / m) * np.einsum("ij,ik->jk", Q, X)
    db = w * dU.sum(axis=0) + (2.0 / m) * Q.sum(axis=0)
    # chain rule through gamma = exp(log_gamma) is inside dlg already
    dlog_gamma = w * dlg
    dcoef0 = w * dc0

    for name, block in (("dW", dW), ("db", db),
                        ("dlog_gamma", dlog_gamma), ("dcoef0", dcoef0)):
        if not np.all(np.isfinite(block)):
            raise ObjectiveError(f"non-finite gradient in block {name}")
    breakdown = LossBreakdown(alignment=align, regularization=reg,
                              total=w * align + reg, w=w)
    return breakdown, GradientBundle(dW=dW, db=db, dlog_gamma=float(dlog_gamma),
                                     dcoef0=float(dcoef0))


def feature_alignment_loss_and_grad(params: AdapterParams, R: np.ndarray,
                                    paired: PairedEmbeddings, rows: np.ndarray,
                                    w: float,
                                    ) -> tuple[LossBreakdown, FeatureGradients]:
    """Feature-space baseline: w on the feature-matching term.

    total = mean_rows [ w*||f(x_i) - R g_i||^2 + ||f(x_i) - x_i||^2 ]
    """
    if not w > 0:
        raise ObjectiveError(f"w must be > 0, got {w}")
    R = np.asarray(R, dtype=np.float64)
    d, dp = paired.source.d, paired.target.d
    if R.shape != (d, dp):
        raise ObjectiveError(f"R shape {R.shape} does not match ({d}, {dp})")
    rows = np.asarray(rows, dtype=np.int64)
    X = paired.source.data[rows]
    G = paired.target.data[rows]
    U = forward_batch(params, X)
    E = U - G @ R.T
    Q = U - X
    m = X.shape[0]
    align = float(np.mean(np.einsum("ij,ij->i", E, E)))
    reg = float(np.mean(np.einsum("ij,ij->i", Q, Q)))
    dU = (2.0 / m) * (w * E + Q)
    dW = np.einsum("ij,ik->jk", dU, X)
    db = dU.sum(axis=0)
    dR = (-2.0 * w / m) * np.einsum("ij,ik->jk", E, G)
    for name, block in (("dW", dW), ("db", db), ("dR", dR)):
        if not np.isfinite(block).all():
            raise ObjectiveError(f"non-finite gradient in block {name}")
    breakdown = LossBreakdown(alignment=align, regularization=reg,
                              total=w * align + reg, w=w)
    return breakdown, FeatureGradients(dW=dW, db=db, dR=dR)


def projection_fit(paired: PairedEmbeddings, ridge: float = 0.0) -> np.ndarray:
    """Closed-form least-squares map P minimizing sum ||P g_i - x_i||^2 + ridge ||P||^2."""
    if ridge < 0:
        raise ObjectiveError(f"ridge must be >= 0, got {ridge}")
    G = paired.target.data
    X = paired.source.data
    n, dp = G.shape
    if ridge == 0 and n < dp:
        raise ObjectiveError(f"need n >= d' ({n} < {dp}) or ridge > 0")
    A = G.T @ G + ridge * np.eye(dp)
    try:
        np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise ObjectiveError("singular normal matrix; use ridge > 0") from None
    return np.linalg.solve(A, G.T @ X).T
