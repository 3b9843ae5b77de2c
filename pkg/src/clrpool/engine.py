"""Conditional logistic regression.

The same code fits individual-level matched sets and pooled designs: a
pooled design is just a :class:`ConditionalDesign` whose strata are pools
and whose rows carry summed term values.

For stratum ``i`` with rows ``x_j`` (case first), the log-likelihood
contribution is ``beta @ x_case - logsumexp_j(beta @ x_j)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats

from . import kernels
from .errors import (
    AliasedCovariate,
    DimensionMismatch,
    InputError,
    NotNested,
    SeparationDetected,
    SingularHessian,
    StrataMismatch,
)

SEPARATION_LIMIT = 30.0
ALIAS_TOL = 1e-12


class ConditionalDesign:
    """Strata of one case row and one or more control rows.

    Stored flat: ``X`` is ``(n_rows, p)``; stratum ``i`` occupies rows
    ``offsets[i]:offsets[i + 1]`` and its first row is the case.
    """

    def __init__(self, X, offsets, term_names, stratum_keys=None):
        X = np.ascontiguousarray(X, dtype=float)
        offsets = np.ascontiguousarray(offsets, dtype=np.intp)
        if X.ndim != 2:
            raise DimensionMismatch("X must be two-dimensional")
        if len(term_names) != X.shape[1]:
            raise DimensionMismatch(
                f"{len(term_names)} term names for {X.shape[1]} columns")
        if offsets[0] != 0 or offsets[-1] != X.shape[0] or np.any(np.diff(offsets) < 2):
            raise DimensionMismatch("every stratum needs a case row and >= 1 control row")
        self.X = X
        self.offsets = offsets
        self.term_names = tuple(term_names)
        n = len(offsets) - 1
        self.stratum_keys = tuple(stratum_keys) if stratum_keys is not None else tuple(
            str(i + 1) for i in range(n))
        if len(self.stratum_keys) != n:
            raise DimensionMismatch("one key per stratum required")

    @classmethod
    def from_strata(cls, strata, term_names):
        """Build from ``[{"stratum_key": k, "rows": [{"arm": "case"|"control", "x": [...]}]}]``."""
        blocks, offsets, keys = [], [0], []
        for st in strata:
            rows = st["rows"]
            cases = [r for r in rows if r["arm"] == "case"]
            controls = [r for r in rows if r["arm"] == "control"]
            if len(cases) != 1 or not controls or len(cases) + len(controls) != len(rows):
                raise DimensionMismatch(
                    f"stratum {st['stratum_key']}: need exactly one case and >= 1 control")
            for r in cases + controls:
                x = np.asarray(r["x"], dtype=float)
                if x.shape != (len(term_names),):
                    raise DimensionMismatch(f"stratum {st['stratum_key']}: x has wrong length")
                blocks.append(x)
            offsets.append(offsets[-1] + len(rows))
            keys.append(st["stratum_key"])
        X = np.array(blocks, dtype=float).reshape(-1, len(term_names))
        return cls(X, offsets, term_names, keys)

    @classmethod
    def from_tensor(cls, T, term_names, stratum_keys=None):
        """Balanced design from an ``(n_strata, m + 1, p)`` array, case in slot 0."""
        T = np.asarray(T, dtype=float)
        n, width, p = T.shape
        return cls(T.reshape(n * width, p), np.arange(n + 1) * width, term_names, stratum_keys)

    @property
    def n_strata(self) -> int:
        return len(self.offsets) - 1

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def strata(self):
        for i, key in enumerate(self.stratum_keys):
            lo, hi = self.offsets[i], self.offsets[i + 1]
            rows = [{"arm": "case" if r == lo else "control", "x": self.X[r].copy()}
                    for r in range(lo, hi)]
            yield {"stratum_key": key, "rows": rows}

    def select(self, term_names) -> "ConditionalDesign":
        idx = [self.term_names.index(t) for t in term_names]
        return ConditionalDesign(self.X[:, idx], self.offsets, term_names, self.stratum_keys)

    def stratum_centered(self) -> np.ndarray:
        sizes = np.diff(self.offsets)
        means = np.add.reduceat(self.X, self.offsets[:-1], axis=0) / sizes[:, None]
        return self.X - np.repeat(means, sizes, axis=0)

    def aliased_terms(self) -> list[str]:
        """Columns with zero within-stratum variation in every stratum."""
        if self.X.size == 0:
            return []
        centered = np.abs(self.stratum_centered()).max(axis=0)
        scale = np.maximum(1.0, np.abs(self.X).max(axis=0))
        return [t for t, c, s in zip(self.term_names, centered, scale) if c <= ALIAS_TOL * s]


def _check_beta(d: ConditionalDesign, beta):
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (d.p,):
        raise DimensionMismatch(f"beta has shape {beta.shape}, design has p={d.p}")
    if not np.all(np.isfinite(beta)):
        raise InputError("beta must be finite")
    return beta


def log_likelihood(d: ConditionalDesign, beta) -> float:
    return kernels.clr_eval(d.X, d.offsets, _check_beta(d, beta), 0)[0]


def score(d: ConditionalDesign, beta) -> np.ndarray:
    return kernels.clr_eval(d.X, d.offsets, _check_beta(d, beta), 1)[1]


def hessian(d: ConditionalDesign, beta) -> np.ndarray:
    return kernels.clr_eval(d.X, d.offsets, _check_beta(d, beta), 2)[2]


@dataclass
class FitResult:
    term_names: tuple[str, ...]
    beta_hat: np.ndarray
    cov_matrix: np.ndarray
    se: np.ndarray
    wald_ci: np.ndarray          # (p, 2), log-OR scale
    log_lik: float
    aic: float
    n_strata: int
    iterations: int
    converged: bool
    gradient_norm: float
    ci_level: float = 0.95
    stratum_keys: tuple = field(default=(), repr=False)

    @property
    def p(self) -> int:
        return len(self.term_names)

    @property
    def odds_ratios(self) -> np.ndarray:
        return np.exp(self.beta_hat)

    @property
    def or_ci(self) -> np.ndarray:
        return np.exp(self.wald_ci)

    def to_dict(self) -> dict:
        return {
            "terms": list(self.term_names),
            "estimate": self.beta_hat.tolist(),
            "se": self.se.tolist(),
            "or": self.odds_ratios.tolist(),
            "ci_lo": self.wald_ci[:, 0].tolist(),
            "ci_hi": self.wald_ci[:, 1].tolist(),
            "ci_level": self.ci_level,
            "loglik": self.log_lik,
            "aic": self.aic,
            "converged": self.converged,
            "iterations": self.iterations,
            "n_strata": self.n_strata,
            "gradient_norm": self.gradient_norm,
            "cov": self.cov_matrix.tolist(),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, data: dict) -> "FitResult":
        est = np.asarray(data["estimate"], dtype=float)
        se = np.asarray(data["se"], dtype=float)
        cov = np.asarray(data.get("cov", np.diag(se ** 2)), dtype=float).reshape(len(est), len(est))
        return cls(tuple(data["terms"]), est, cov, se,
                   np.column_stack([data["ci_lo"], data["ci_hi"]]).reshape(len(est), 2),
                   float(data["loglik"]), float(data["aic"]), int(data.get("n_strata", 0)),
                   int(data["iterations"]), bool(data["converged"]),
                   float(data.get("gradient_norm", float("nan"))),
                   float(data.get("ci_level", 0.95)))


def _newton_direction(H, g):
    """Solve ``-H step = g`` via Cholesky of ``-H``."""
    try:
        c = linalg.cho_factor(-H, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError):
        raise SingularHessian("negative Hessian is not positive definite") from None
    return linalg.cho_solve(c, g), c


def fit(d: ConditionalDesign, tol: float = 1e-8, max_iter: int = 50,
        ci_level: float = 0.95, max_halvings: int = 10) -> FitResult:
    """Newton-Raphson maximum likelihood from ``beta = 0``.

    Converged means ``max|score| < tol``. A fit that runs out of iterations is
    returned with ``converged=False`` rather than raised.
    """
    if d.n_strata < 1:
        raise InputError("design has no strata")
    aliased = d.aliased_terms()
    if aliased:
        raise AliasedCovariate(aliased)

    beta = np.zeros(d.p)
    ll, g, H = kernels.clr_eval(d.X, d.offsets, beta, 2)
    iterations = 0
    converged = bool(np.max(np.abs(g)) < tol) if d.p else True
    while not converged and iterations < max_iter:
        step, _ = _newton_direction(H, g)
        t = 1.0
        for _ in range(max_halvings + 1):
            cand = beta + t * step
            ll_new = kernels.clr_eval(d.X, d.offsets, cand, 0)[0]
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        beta = cand
        iterations += 1
        if np.any(np.abs(beta) > SEPARATION_LIMIT):
            bad = [n for n, b in zip(d.term_names, beta) if abs(b) > SEPARATION_LIMIT]
            raise SeparationDetected(
                f"coefficient(s) for {', '.join(bad)} diverging (|beta| > {SEPARATION_LIMIT:g}); "
                "monotone likelihood")
        ll, g, H = kernels.clr_eval(d.X, d.offsets, beta, 2)
        converged = bool(np.max(np.abs(g)) < tol)

    if converged and np.any(beta):
        # a vanishing score can also mean a likelihood still rising towards its
        # supremum; at a true maximum no point on the ray beyond beta does better
        ll_far = kernels.clr_eval(d.X, d.offsets, 2.0 * beta, 0)[0]
        if ll_far > ll + 64 * np.finfo(float).eps * (1.0 + abs(ll)):
            j = int(np.argmax(np.abs(beta)))
            raise SeparationDetected(
                f"likelihood keeps increasing along the estimate (largest |beta| for "
                f"{d.term_names[j]}); monotone likelihood")

    try:
        c = linalg.cho_factor(-H, lower=True)
    except (linalg.LinAlgError, ValueError):
        raise SingularHessian("information matrix is singular at the estimate") from None
    cov = linalg.cho_solve(c, np.eye(d.p))
    cov = 0.5 * (cov + cov.T)
    se = np.sqrt(np.diag(cov))
    z = stats.norm.ppf(0.5 + ci_level / 2.0)
    ci = np.column_stack([beta - z * se, beta + z * se])
    return FitResult(d.term_names, beta, cov, se, ci, float(ll), float(-2.0 * ll + 2 * d.p),
                     d.n_strata, iterations, converged, float(np.max(np.abs(g))) if d.p else 0.0,
                     ci_level, d.stratum_keys)


@dataclass(frozen=True)
class LRTest:
    stat: float
    df: int
    p_value: float


def lr_test(full: tuple[FitResult, ConditionalDesign],
            reduced: tuple[FitResult, ConditionalDesign]) -> LRTest:
    """Likelihood-ratio test of a reduced model nested in ``full``."""
    f_fit, f_design = full
    r_fit, r_design = reduced
    if not set(r_fit.term_names) <= set(f_fit.term_names):
        extra = sorted(set(r_fit.term_names) - set(f_fit.term_names))
        raise NotNested(f"reduced model has terms not in the full model: {extra}")
    if (f_design.n_strata != r_design.n_strata
            or sorted(f_design.stratum_keys) != sorted(r_design.stratum_keys)
            or not np.array_equal(np.diff(f_design.offsets), np.diff(r_design.offsets))):
        raise StrataMismatch("full and reduced fits use different strata")
    stat = max(0.0, 2.0 * (f_fit.log_lik - r_fit.log_lik))
    df = f_fit.p - r_fit.p
    p = 1.0 if df == 0 else float(stats.chi2.sf(stat, df))
    return LRTest(stat, df, p)


def wald_p_values(res: FitResult) -> np.ndarray:
    return 2.0 * stats.norm.sf(np.abs(res.beta_hat / res.se))

