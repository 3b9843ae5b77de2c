# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled conditional log-likelihood kernel (same contract as _pykernel)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


def clr_eval(X, offsets, beta, int order=2):
    cdef double[:, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef cnp.intp_t[::1] off = np.ascontiguousarray(offsets, dtype=np.intp)
    cdef double[::1] b = np.ascontiguousarray(beta, dtype=np.float64)
    cdef Py_ssize_t p = x.shape[1]
    cdef Py_ssize_t n_strata = off.shape[0] - 1
    cdef Py_ssize_t s, r, j, k, lo, hi
    cdef double top, total, e, wr, ll = 0.0

    eta_arr = np.empty(x.shape[0])
    w_arr = np.empty(x.shape[0])
    score_arr = np.zeros(p)
    hess_arr = np.zeros((p, p))
    xbar_arr = np.empty(p)
    cdef double[::1] eta = eta_arr
    cdef double[::1] w = w_arr
    cdef double[::1] score = score_arr
    cdef double[:, ::1] hess = hess_arr
    cdef double[::1] xbar = xbar_arr

    with nogil:
        for s in range(n_strata):
            lo = off[s]
            hi = off[s + 1]
            top = -1e308
            for r in range(lo, hi):
                e = 0.0
                for j in range(p):
                    e = e + x[r, j] * b[j]
                eta[r] = e
                if e > top:
                    top = e
            total = 0.0
            for r in range(lo, hi):
                w[r] = exp(eta[r] - top)
                total = total + w[r]
            ll = ll + eta[lo] - top - log(total)
            if order < 1:
                continue
            for j in range(p):
                xbar[j] = 0.0
            for r in range(lo, hi):
                w[r] = w[r] / total
                for j in range(p):
                    xbar[j] = xbar[j] + w[r] * x[r, j]
            for j in range(p):
                score[j] = score[j] + x[lo, j] - xbar[j]
            if order < 2:
                continue
            for r in range(lo, hi):
                wr = w[r]
                for j in range(p):
                    e = wr * (x[r, j] - xbar[j])
                    for k in range(j + 1):
                        hess[j, k] = hess[j, k] - e * (x[r, k] - xbar[k])

    if order < 1:
        return ll, None, None
    if order < 2:
        return ll, score_arr, None
    for j in range(p):
        for k in range(j):
            hess[k, j] = hess[j, k]
    return ll, score_arr, hess_arr
