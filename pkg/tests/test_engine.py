import math

import numpy as np
import pytest
from hypothesis import given, settings
from scipy import stats

from clrpool import kernels
from clrpool.datasets import INFERT_TERMS, load_infert
from clrpool.engine import (
    ConditionalDesign,
    FitResult,
    fit,
    hessian,
    log_likelihood,
    lr_test,
    score,
    wald_p_values,
)
from clrpool.errors import (
    AliasedCovariate,
    DimensionMismatch,
    NotNested,
    SeparationDetected,
    StrataMismatch,
)
from clrpool.pooling import unpooled_design

from conftest import designs, naive_loglik, random_design


# --- likelihood ----------------------------------------------------------------

def test_loglik_at_zero_is_uniform():
    rng = np.random.default_rng(1)
    d = random_design(rng, 7, 2, ragged=False)
    assert log_likelihood(d, [0, 0]) == pytest.approx(-7 * math.log(3), rel=1e-14)


def test_loglik_hand_value():
    d = ConditionalDesign([[1.0], [0.0]], [0, 2], ["x"])
    assert log_likelihood(d, [math.log(2)]) == pytest.approx(math.log(2 / 3), rel=1e-14)


@given(designs())
def test_loglik_matches_naive_formula(case):
    d, beta = case
    ref = naive_loglik(d.X.tolist(), d.offsets.tolist(), beta.tolist())
    assert log_likelihood(d, beta) == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_loglik_stable_for_large_eta():
    d = ConditionalDesign([[700.0], [699.0], [0.0]], [0, 3], ["x"])
    ll = log_likelihood(d, [1.0])
    assert math.isfinite(ll)
    assert ll == pytest.approx(-math.log1p(math.exp(-1) + math.exp(-700)), rel=1e-12)


def test_dimension_checks():
    d = ConditionalDesign([[1.0], [0.0]], [0, 2], ["x"])
    with pytest.raises(DimensionMismatch):
        log_likelihood(d, [1.0, 2.0])
    with pytest.raises(DimensionMismatch):
        ConditionalDesign([[1.0], [0.0]], [0, 2], ["x", "y"])
    with pytest.raises(DimensionMismatch):
        ConditionalDesign([[1.0], [0.0]], [0, 1, 2], ["x"])


def test_symmetric_stratum_has_zero_score():
    d = ConditionalDesign([[1.0, 2.0], [0.0, 4.0], [2.0, 0.0]], [0, 3], ["a", "b"])
    assert np.allclose(score(d, [0.0, 0.0]), 0.0, atol=1e-15)


# --- derivatives vs finite differences ------------------------------------------

def fd_gradient(f, beta, h=1e-6):
    g = np.empty_like(beta)
    for j in range(len(beta)):
        e = np.zeros_like(beta)
        e[j] = h
        g[j] = (f(beta + e) - f(beta - e)) / (2 * h)
    return g


def close_rel(a, b, tol):
    return np.all(np.abs(a - b) <= tol * np.maximum(1.0, np.abs(b)))


@given(designs())
def test_score_matches_finite_differences(case):
    d, beta = case
    num = fd_gradient(lambda b: log_likelihood(d, b), beta)
    assert close_rel(score(d, beta), num, 1e-6)


@given(designs())
def test_hessian_matches_finite_differences(case):
    d, beta = case
    num = np.column_stack([fd_gradient(lambda b: score(d, b)[i], beta) for i in range(d.p)])
    assert close_rel(hessian(d, beta), num, 1e-6)


@given(designs())
def test_hessian_concave_and_symmetric(case):
    d, beta = case
    H = hessian(d, beta)
    assert np.array_equal(H, H.T) or np.allclose(H, H.T, rtol=0, atol=1e-14)
    top = np.linalg.eigvalsh(H).max()
    assert top <= 1e-8 * max(1.0, np.abs(H).max())


@given(designs())
@settings(max_examples=50)
def test_backends_agree(case):
    d, beta = case
    a = kernels.clr_eval(d.X, d.offsets, beta, 2)
    b = kernels.python_clr_eval(d.X, d.offsets, beta, 2)
    assert a[0] == pytest.approx(b[0], rel=1e-12, abs=1e-12)
    assert np.allclose(a[1], b[1], rtol=1e-12, atol=1e-12)
    assert np.allclose(a[2], b[2], rtol=1e-12, atol=1e-12)


# --- fitting ----------------------------------------------------------------------

def grid_argmax(d):
    grid = np.round(np.arange(-5, 5 + 5e-4, 1e-3), 10)
    X, off = d.X[:, 0].tolist(), d.offsets.tolist()
    best, arg = -math.inf, None
    for b in grid:
        ll = naive_loglik([[v] for v in X], off, [b])
        if ll > best:
            best, arg = ll, b
    return arg


def test_closed_form_matched_pairs():
    # 1:1 pairs with a binary exposure: beta_hat = log(n10 / n01), se^2 = 1/n10 + 1/n01
    pairs = [(1, 0)] * 13 + [(0, 1)] * 5 + [(1, 1)] * 7 + [(0, 0)] * 4
    X = np.array([[v] for pair in pairs for v in pair], dtype=float)
    d = ConditionalDesign(X, np.arange(len(pairs) + 1) * 2, ["x"])
    res = fit(d)
    assert res.beta_hat[0] == pytest.approx(math.log(13 / 5), abs=1e-10)
    assert res.se[0] == pytest.approx(math.sqrt(1 / 13 + 1 / 5), abs=1e-8)


def test_newton_matches_grid_search_small():
    rng = np.random.default_rng(2)
    done = 0
    while done < 10:
        d = random_design(rng, int(rng.integers(1, 4)), 1, 4)
        try:
            res = fit(d)
        except SeparationDetected:
            continue
        if abs(res.beta_hat[0]) > 4.9:
            continue
        assert abs(res.beta_hat[0] - grid_argmax(d)) <= 2e-3
        done += 1


def test_infert_reproduces_published_table():
    res = fit(unpooled_design(load_infert(), INFERT_TERMS))
    expected = [(5.27, 1.71, 16.27), (14.74, 4.77, 45.56), (0.28, 0.06, 1.26)]
    for j, (o, lo, hi) in enumerate(expected):
        assert abs(round(res.odds_ratios[j], 2) - o) <= 0.01
        assert abs(round(res.or_ci[j, 0], 2) - lo) <= 0.02
        assert abs(round(res.or_ci[j, 1], 2) - hi) <= 0.02
    assert res.converged and res.gradient_norm < 1e-8


def test_infert_frozen_estimates():
    # frozen from a derivative-free Nelder-Mead run on the naive likelihood
    res = fit(unpooled_design(load_infert(), INFERT_TERMS))
    assert np.allclose(res.beta_hat, [1.66213346, 2.69028976, -1.25658405], atol=1e-6)
    assert res.log_lik == pytest.approx(-69.76714217935778, abs=1e-9)
    d = unpooled_design(load_infert(), INFERT_TERMS)
    assert np.abs(fd_gradient(lambda b: log_likelihood(d, b), res.beta_hat)).max() < 1e-5


def test_fit_result_invariants():
    rng = np.random.default_rng(3)
    d = random_design(rng, 40, 3, 4)
    res = fit(d)
    assert res.converged
    assert np.abs(score(d, res.beta_hat)).max() < 1e-8
    assert np.allclose(res.se, np.sqrt(np.diag(res.cov_matrix)))
    assert np.allclose(res.cov_matrix, res.cov_matrix.T)
    assert np.linalg.eigvalsh(res.cov_matrix).min() >= 0
    assert res.aic == pytest.approx(-2 * res.log_lik + 2 * 3)
    z = stats.norm.ppf(0.975)
    assert np.allclose(res.wald_ci[:, 0], res.beta_hat - z * res.se)
    assert np.allclose(res.or_ci, np.exp(res.wald_ci))
    res90 = fit(d, ci_level=0.9)
    assert np.all(res90.wald_ci[:, 1] - res90.wald_ci[:, 0] < res.wald_ci[:, 1] - res.wald_ci[:, 0])
    assert wald_p_values(res).shape == (3,)


def test_json_round_trip():
    res = fit(unpooled_design(load_infert(), INFERT_TERMS))
    d = res.to_dict()
    for key in ("terms", "estimate", "se", "or", "ci_lo", "ci_hi", "loglik", "aic",
                "converged", "iterations"):
        assert key in d
    back = FitResult.from_dict(d)
    assert np.array_equal(back.beta_hat, res.beta_hat)
    assert np.array_equal(back.wald_ci, res.wald_ci)
    assert back.term_names == res.term_names


def test_aliased_covariate_named():
    X = np.array([[1.0, 5.0], [0.0, 5.0], [0.5, 2.0], [1.5, 2.0]])
    d = ConditionalDesign(X, [0, 2, 4], ["x", "const_in_stratum"])
    with pytest.raises(AliasedCovariate) as exc:
        fit(d)
    assert exc.value.terms == ["const_in_stratum"]


def test_identical_rows_are_aliased():
    d = ConditionalDesign([[1.0], [1.0], [2.0], [2.0]], [0, 2, 4], ["x"])
    with pytest.raises(AliasedCovariate):
        fit(d)


def test_separation_detected():
    d = ConditionalDesign([[1.0], [0.0], [2.0], [1.0]], [0, 2, 4], ["x"])
    with pytest.raises(SeparationDetected):
        fit(d)


def test_not_converged_is_flagged():
    rng = np.random.default_rng(4)
    d = random_design(rng, 30, 2, 4)
    res = fit(d, max_iter=1, tol=1e-14)
    assert not res.converged and res.iterations == 1


# --- invariances ------------------------------------------------------------------

def fitted(seed, n=25, p=2):
    rng = np.random.default_rng(seed)
    d = random_design(rng, n, p, 4)
    d.X[d.offsets[:-1], 0] += 0.8
    return d, fit(d)


def test_stratum_and_control_permutation_invariance():
    d, res = fitted(5)
    rng = np.random.default_rng(6)
    blocks = [d.X[d.offsets[i]:d.offsets[i + 1]] for i in range(d.n_strata)]
    new = []
    for i in rng.permutation(len(blocks)):
        b = blocks[i]
        new.append(np.vstack([b[:1], b[1:][rng.permutation(len(b) - 1)]]))
    sizes = [len(b) for b in new]
    d2 = ConditionalDesign(np.vstack(new), np.concatenate([[0], np.cumsum(sizes)]), d.term_names)
    res2 = fit(d2)
    assert np.allclose(res2.beta_hat, res.beta_hat, rtol=0, atol=1e-12)
    assert np.allclose(res2.se, res.se, rtol=0, atol=1e-12)
    assert res2.log_lik == pytest.approx(res.log_lik, abs=1e-11)


def test_translation_invariance():
    d, res = fitted(7)
    rng = np.random.default_rng(8)
    shift = rng.normal(scale=3, size=(d.n_strata, d.p))
    X = d.X + np.repeat(shift, np.diff(d.offsets), axis=0)
    res2 = fit(ConditionalDesign(X, d.offsets, d.term_names))
    assert np.allclose(res2.beta_hat, res.beta_hat, rtol=0, atol=1e-8)


def test_scaling_equivariance():
    d, res = fitted(9)
    X = d.X.copy()
    X[:, 1] *= 4.0
    res2 = fit(ConditionalDesign(X, d.offsets, d.term_names))
    assert res2.beta_hat[1] == pytest.approx(res.beta_hat[1] / 4, abs=1e-8)
    assert res2.se[1] == pytest.approx(res.se[1] / 4, abs=1e-8)
    assert res2.beta_hat[0] == pytest.approx(res.beta_hat[0], abs=1e-8)


# --- likelihood ratio test ----------------------------------------------------------

def test_lr_identity_and_errors():
    d, res = fitted(10)
    t = lr_test((res, d), (res, d))
    assert t.stat == 0 and t.df == 0 and t.p_value == 1.0
    red = d.select(["x0"])
    with pytest.raises(NotNested):
        lr_test((fit(red), red), (res, d))
    other, ores = fitted(11, n=10)
    with pytest.raises(StrataMismatch):
        lr_test((ores, other), (fit(d.select(["x0"])), d.select(["x0"])))


def test_lr_statistic_is_chi_square_under_null():
    rng = np.random.default_rng(12)
    stats_ = []
    for _ in range(1000):
        n = 60
        X = rng.normal(size=(2 * n, 2))
        X[0::2, 0] += 0.5
        d = ConditionalDesign(X, np.arange(n + 1) * 2, ["signal", "noise"])
        red = d.select(["signal"])
        t = lr_test((fit(d), d), (fit(red), red))
        assert t.df == 1
        stats_.append(t.stat)
    assert stats.kstest(stats_, stats.chi2(1).cdf).pvalue > 0.01
