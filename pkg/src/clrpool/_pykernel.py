"""Numpy implementation of the conditional log-likelihood kernel.

Rows of ``X`` are grouped into contiguous strata delimited by ``offsets``
(length ``n_strata + 1``); the first row of every stratum is the case.
"""
import numpy as np


def clr_eval(X, offsets, beta, order=2):
    """Return ``(loglik, score, hessian)``; derivatives are ``None`` below ``order``."""
    X = np.asarray(X, dtype=float)
    offsets = np.asarray(offsets, dtype=np.intp)
    beta = np.asarray(beta, dtype=float)
    starts = offsets[:-1]
    sizes = np.diff(offsets)
    p = X.shape[1]

    eta = X @ beta
    top = np.maximum.reduceat(eta, starts)
    w = np.exp(eta - np.repeat(top, sizes))
    total = np.add.reduceat(w, starts)
    loglik = float(np.sum(eta[starts] - top - np.log(total)))
    if order < 1:
        return loglik, None, None

    w /= np.repeat(total, sizes)
    xbar = np.add.reduceat(w[:, None] * X, starts, axis=0)
    score = (X[starts] - xbar).sum(axis=0)
    if order < 2:
        return loglik, score, None

    Xc = X - np.repeat(xbar, sizes, axis=0)
    hess = -((Xc * w[:, None]).T @ Xc)
    hess = 0.5 * (hess + hess.T)
    return loglik, score, hess.reshape(p, p)
