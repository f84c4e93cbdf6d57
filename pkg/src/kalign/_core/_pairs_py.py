"""Pure-numpy fallback for the hot pair-loss kernel.

Semantics must match _pairs_cy exactly: the compiled twin routes its
final reductions through the same numpy calls used here, so the two
return bit-identical outputs. Only fixed-schedule vectorized ops are
used so results do not depend on the thread count.
"""

from __future__ import annotations

import numpy as np

from ..kernels import _ipow


def norm_poly_pair_pass(U, k2, ia, ib, gamma, coef0, degree):
    """Alignment loss and raw gradients for a normalized-polynomial k1.

    Args:
        U: m x d adapted source rows (float64).
        k2: per-pair target kernel values, length B.
        ia, ib: pair index arrays into U, length B.
        gamma, coef0, degree: k1 parameters.

    Returns:
        (align, dU, dgamma, dcoef0) where align = mean((k1 - k2)^2),
        dU is d(align)/dU, and dgamma/dcoef0 are derivatives with
        respect to gamma and coef0 (not log gamma).
    """
    U = np.asarray(U, dtype=np.float64)
    B = len(ia)
    ui, uj = U[ia], U[ib]
    s_ij = np.einsum("ij,ij->i", ui, uj)
    s_ii = np.einsum("ij,ij->i", ui, ui)
    s_jj = np.einsum("ij,ij->i", uj, uj)
    a_ij = gamma * s_ij + coef0
    a_ii = gamma * s_ii + coef0
    a_jj = gamma * s_jj + coef0
    if (a_ii <= 0).any() or (a_jj <= 0).any():
        p = int(np.argmax((a_ii <= 0) | (a_jj <= 0)))
        raise ValueError(
            f"pair {p}: normalized polynomial undefined: k(x,x) <= 0")
    am1 = _ipow(a_ij, degree - 1)
    D = np.sqrt(_ipow(a_ii, degree) * _ipow(a_jj, degree))
    k1 = am1 * a_ij / D
    r = k1 - np.asarray(k2, dtype=np.float64)
    align = float(np.mean(r * r))

    # dk1/dui = degree*gamma*(a_ij^{deg-1}/D * uj - (k1/a_ii) * ui)
    pref = degree * gamma
    coef_j = am1 / D
    scale = 2.0 / B
    wi = scale * r * pref
    dui = wi[:, None] * (coef_j[:, None] * uj - (k1 / a_ii)[:, None] * ui)
    duj = wi[:, None] * (coef_j[:, None] * ui - (k1 / a_jj)[:, None] * uj)
    dU = np.zeros_like(U)
    np.add.at(dU, ia, dui)
    np.add.at(dU, ib, duj)

    dk_dg = degree * am1 * s_ij / D \
        - (degree / 2.0) * k1 * (s_ii / a_ii + s_jj / a_jj)
    dk_dc = degree * am1 / D \
        - (degree / 2.0) * k1 * (1.0 / a_ii + 1.0 / a_jj)
    dgamma = float(np.sum(scale * r * dk_dg))
    dcoef0 = float(np.sum(scale * r * dk_dc))
    return align, dU, dgamma, dcoef0
