"""Kernel evaluation, normalization, matrices, and analytic derivatives.

Families: polynomial (gamma*<x,y> + c)^degree with optional normalization
k(x,y)/sqrt(k(x,x) k(y,y)), gaussian exp(-gamma*||x-y||^2), and cosine.
Gaussian and cosine are intrinsically normalized and ignore coef0/degree.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

FAMILIES = ("polynomial", "gaussian", "cosine")


class KernelError(ValueError):
    """Invalid spec or input for a kernel evaluation."""


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus parameters.

    Args:
        family: "polynomial", "gaussian", or "cosine".
        gamma: coefficient, > 0.
        coef0: polynomial offset c, >= 0 when normalized.
        degree: polynomial degree, >= 1.
        normalized: divide by sqrt(k(x,x) k(y,y)) (polynomial only;
            the other families are normalized by construction).
    """

    family: str = "polynomial"
    gamma: float = 1.0
    coef0: float = 1.0
    degree: int = 3
    normalized: bool = True

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise KernelError(f"unknown kernel family {self.family!r}")
        if not self.gamma > 0:
            raise KernelError(f"gamma must be > 0, got {self.gamma}")
        if self.degree < 1:
            raise KernelError(f"degree must be >= 1, got {self.degree}")
        if self.coef0 < 0:
            raise KernelError(f"coef0 must be >= 0, got {self.coef0}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "KernelSpec":
        return cls(**obj)


def default_target_spec(d_target: int) -> KernelSpec:
    """Fixed k2: normalized degree-3 polynomial, gamma = 1/d', c = 1."""
    return KernelSpec(family="polynomial", gamma=1.0 / d_target, coef0=1.0,
                      degree=3, normalized=True)


def default_source_spec(d_source: int) -> KernelSpec:
    """Initial k1 (gamma, c become trainable): same family, gamma = 1/d."""
    return KernelSpec(family="polynomial", gamma=1.0 / d_source, coef0=1.0,
                      degree=3, normalized=True)


def _check_dims(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise KernelError(f"dimension mismatch: {x.shape} vs {y.shape}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise KernelError("non-finite input")
    return x, y


def _ipow(a, p: int):
    """Integer power by left-fold repeated multiplication.

    Every polynomial-kernel code path (including the compiled core) uses
    this same fold so equal inputs give bit-identical kernel values; libm
    pow would differ in the last bit.
    """
    if p == 0:
        return np.ones_like(a) if isinstance(a, np.ndarray) else 1.0
    out = a
    for _ in range(p - 1):
        out = out * a
    return out


def eval(spec: KernelSpec, x: np.ndarray, y: np.ndarray) -> float:  # noqa: A001
    """k(x, y) for one vector pair."""
    x, y = _check_dims(x, y)
    if spec.family == "polynomial":
        kxy = _ipow(spec.gamma * float(x @ y) + spec.coef0, spec.degree)
        if not spec.normalized:
            return kxy
        axx = spec.gamma * float(x @ x) + spec.coef0
        ayy = spec.gamma * float(y @ y) + spec.coef0
        if axx <= 0 or ayy <= 0:
            raise KernelError("normalized polynomial undefined: k(x,x) <= 0")
        return kxy / np.sqrt(_ipow(axx, spec.degree) * _ipow(ayy, spec.degree))
    if spec.family == "gaussian":
        diff = x - y
        return float(np.exp(-spec.gamma * (diff @ diff)))
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise KernelError("cosine kernel undefined for zero-norm input")
    return float(x @ y) / (nx * ny)


def kernel_matrix(spec: KernelSpec, X: np.ndarray, Y: np.ndarray | None = None) -> np.ndarray:
    """Entry (i, j) = eval(spec, X[i], Y[j]); Y = X when omitted."""
    X = np.asarray(X, dtype=np.float64)
    Y = X if Y is None else np.asarray(Y, dtype=np.float64)
    if X.shape[1] != Y.shape[1]:
        raise KernelError(f"column mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if spec.family == "polynomial":
        G = _ipow(spec.gamma * (X @ Y.T) + spec.coef0, spec.degree)
        if not spec.normalized:
            return G
        ax = spec.gamma * np.einsum("ij,ij->i", X, X) + spec.coef0
        ay = spec.gamma * np.einsum("ij,ij->i", Y, Y) + spec.coef0
        if (ax <= 0).any() or (ay <= 0).any():
            raise KernelError("normalized polynomial undefined: k(x,x) <= 0")
        return G / np.sqrt(np.outer(_ipow(ax, spec.degree),
                                    _ipow(ay, spec.degree)))
    if spec.family == "gaussian":
        sq = (np.einsum("ij,ij->i", X, X)[:, None]
              + np.einsum("ij,ij->i", Y, Y)[None, :] - 2.0 * (X @ Y.T))
        return np.exp(-spec.gamma * np.maximum(sq, 0.0))
    nx = np.linalg.norm(X, axis=1)
    ny = np.linalg.norm(Y, axis=1)
    if (nx == 0).any() or (ny == 0).any():
        raise KernelError("cosine kernel undefined for zero-norm input")
    return (X @ Y.T) / np.outer(nx, ny)


def grad_wrt_x(spec: KernelSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Exact dk(x,y)/dx, quotient rule included for normalized kernels."""
    x, y = _check_dims(x, y)
    if spec.family == "polynomial":
        g, c, p = spec.gamma, spec.coef0, spec.degree
        axy = g * float(x @ y) + c
        if not spec.normalized:
            return p * _ipow(axy, p - 1) * g * y
        axx = g * float(x @ x) + c
        ayy = g * float(y @ y) + c
        if axx <= 0 or ayy <= 0:
            raise KernelError("normalized polynomial undefined: k(x,x) <= 0")
        denom = np.sqrt(_ipow(axx, p) * _ipow(ayy, p))
        ktil = _ipow(axy, p) / denom
        # d/dx [axy^p / (axx ayy)^{p/2}] = p g (axy^{p-1}/denom) y - p g (ktil/axx) x
        return p * g * ((_ipow(axy, p - 1) / denom) * y - (ktil / axx) * x)
    if spec.family == "gaussian":
        diff = x - y
        k = np.exp(-spec.gamma * float(diff @ diff))
        return -2.0 * spec.gamma * k * diff
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise KernelError("cosine kernel undefined for zero-norm input")
    cosv = float(x @ y) / (nx * ny)
    return y / (nx * ny) - cosv * x / (nx * nx)


def grad_wrt_params(spec: KernelSpec, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """(dk/dgamma, dk/dc) for the polynomial family."""
    if spec.family != "polynomial":
        raise KernelError(f"grad_wrt_params supports polynomial only, got {spec.family}")
    x, y = _check_dims(x, y)
    g, c, p = spec.gamma, spec.coef0, spec.degree
    sxy = float(x @ y)
    axy = g * sxy + c
    if not spec.normalized:
        return p * _ipow(axy, p - 1) * sxy, p * _ipow(axy, p - 1)
    sxx, syy = float(x @ x), float(y @ y)
    axx, ayy = g * sxx + c, g * syy + c
    if axx <= 0 or ayy <= 0:
        raise KernelError("normalized polynomial undefined: k(x,x) <= 0")
    denom = np.sqrt(_ipow(axx, p) * _ipow(ayy, p))
    am1 = _ipow(axy, p - 1)
    ktil = am1 * axy / denom
    dgamma = p * am1 * sxy / denom - 0.5 * p * ktil * (sxx / axx + syy / ayy)
    dc = p * am1 / denom - 0.5 * p * ktil * (1.0 / axx + 1.0 / ayy)
    return float(dgamma), float(dc)


def psd_probe(spec: KernelSpec, X: np.ndarray) -> float:
    """Smallest eigenvalue of the kernel matrix over X (n <= 512)."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] > 512:
        raise KernelError(f"psd_probe limited to n <= 512, got {X.shape[0]}")
    K = kernel_matrix(spec, X)
    vals = np.linalg.eigvalsh(0.5 * (K + K.T))
    return float(vals[0])
