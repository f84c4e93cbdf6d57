# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot pair-loss kernel.

Sequential by design: the training loop's byte-reproducibility across
thread counts depends on a fixed reduction order here. The row dot
products come from the same einsum call the numpy twin uses and the
final reductions (mean, sums, scatter-add) go through the same numpy
calls, so both backends return bit-identical outputs.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


cdef inline double ipow(double base, int n):
    # same left fold as kernels._ipow so k1 matches pair_values exactly
    cdef double out = 1.0
    cdef int q
    for q in range(n):
        out *= base
    return out


def norm_poly_pair_pass(object U_in, object k2_in, object ia_in, object ib_in,
                        double gamma, double coef0, int degree):
    """See _pairs_py.norm_poly_pair_pass; identical contract."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] U = \
        np.ascontiguousarray(U_in, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] k2 = \
        np.ascontiguousarray(k2_in, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] ia = \
        np.ascontiguousarray(ia_in, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] ib = \
        np.ascontiguousarray(ib_in, dtype=np.int64)
    ui = U[ia]
    uj = U[ib]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] s_ij = np.einsum("ij,ij->i", ui, uj)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] s_ii = np.einsum("ij,ij->i", ui, ui)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] s_jj = np.einsum("ij,ij->i", uj, uj)
    cdef Py_ssize_t B = ia.shape[0]
    cdef Py_ssize_t d = U.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] rv = np.empty(B)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dkg = np.empty(B)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dkc = np.empty(B)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] dui = np.empty((B, d))
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] duj = np.empty((B, d))
    cdef double scale = 2.0 / B
    cdef double pref = degree * gamma
    cdef double a_ij, a_ii, a_jj, D, k1, r
    cdef double am1, wi, ci, cj, coef_j
    cdef Py_ssize_t p, t, i, j
    for p in range(B):
        i = ia[p]
        j = ib[p]
        a_ij = gamma * s_ij[p] + coef0
        a_ii = gamma * s_ii[p] + coef0
        a_jj = gamma * s_jj[p] + coef0
        if a_ii <= 0 or a_jj <= 0:
            raise ValueError(
                f"pair {p}: normalized polynomial undefined: k(x,x) <= 0")
        D = sqrt(ipow(a_ii, degree) * ipow(a_jj, degree))
        am1 = ipow(a_ij, degree - 1)
        k1 = am1 * a_ij / D
        r = k1 - k2[p]
        rv[p] = r
        wi = scale * r * pref
        coef_j = am1 / D
        ci = k1 / a_ii
        cj = k1 / a_jj
        for t in range(d):
            dui[p, t] = wi * (coef_j * U[j, t] - ci * U[i, t])
            duj[p, t] = wi * (coef_j * U[i, t] - cj * U[j, t])
        dkg[p] = degree * am1 * s_ij[p] / D \
            - (degree / 2.0) * k1 * (s_ii[p] / a_ii + s_jj[p] / a_jj)
        dkc[p] = degree * am1 / D \
            - (degree / 2.0) * k1 * (1.0 / a_ii + 1.0 / a_jj)
    align = float(np.mean(rv * rv))
    dU = np.zeros_like(U)
    np.add.at(dU, ia, dui)
    np.add.at(dU, ib, duj)
    dgamma = float(np.sum(scale * rv * dkg))
    dcoef0 = float(np.sum(scale * rv * dkc))
    return align, dU, dgamma, dcoef0
