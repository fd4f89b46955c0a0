import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import central_difference
from threshold_cox.domain import Cohort, Method
from threshold_cox.errormodel import ErrorModelParams, ReliabilityStudy, estimate_nuisance
from threshold_cox.estimators import fit_rc
from threshold_cox.partial_lik import ExponentialRelRisk, maximize
from threshold_cox.variance import (
    NuisanceScore, nuisance_corrected_from_parts, nuisance_score, nuisance_score_derivative,
    sandwich_cov, sandwich_from_parts, wald_ci, wald_pvalues,
)


def test_sandwich_matches_statsmodels_robust_covariance():
    sm = pytest.importorskip("statsmodels.duration.hazard_regression")
    rng = np.random.default_rng(8)
    n = 400
    x = rng.normal(size=(n, 2))
    t = rng.exponential(1 / np.exp(x @ [0.6, -0.4] + 0.5 * x[:, 0] ** 2))  # misspecified on purpose
    c = rng.exponential(2.0, n)
    time, status = np.minimum(t, c), (t <= c).astype(int)
    co = Cohort.from_arrays(time, status, x[:, 1], x[:, :1])
    rr = ExponentialRelRisk(x)
    th = maximize(co, rr, np.zeros(2)).theta
    ref = sm.PHReg(time, x, status=status, ties="breslow").fit(groups=np.arange(n))
    np.testing.assert_allclose(sandwich_cov(co, rr, th), ref.cov_params(), rtol=1e-6)


def study(seed=0, m=50, k=3):
    rng = np.random.default_rng(seed)
    x = 0.5 + rng.normal(size=m)
    return ReliabilityStudy(x[:, None] + 0.6 * rng.normal(size=(m, k)))


def test_nuisance_estimating_functions_vanish_at_the_estimate():
    s = study()
    em = estimate_nuisance(s)
    ns = nuisance_score(s, em)
    np.testing.assert_allclose(ns.psi.sum(axis=0), 0.0, atol=1e-10)


def test_nuisance_jacobian_matches_finite_differences():
    s = study(1)
    em = estimate_nuisance(s)

    def total(phi):
        return nuisance_score(s, em.with_nuisance(phi)).psi.sum(axis=0)
    fd = central_difference(total, em.nuisance_vector())
    np.testing.assert_allclose(nuisance_score(s, em).jacobian, fd, rtol=1e-7, atol=1e-7)


def test_nuisance_covariance_matches_replicated_studies():
    ests, covs = [], []
    for seed in range(400):
        s = study(seed, m=200, k=2)
        em = estimate_nuisance(s)
        ests.append(em.nuisance_vector())
        covs.append(nuisance_score(s, em).cov_phi)
    emp = np.cov(np.array(ests), rowvar=False)
    mean_cov = np.mean(covs, axis=0)
    np.testing.assert_allclose(np.sqrt(np.diag(mean_cov)), np.sqrt(np.diag(emp)), rtol=0.12)


def test_nuisance_score_derivative_of_linear_function():
    em = ErrorModelParams(alpha0=0.3, sigma_x2=1.2, sigma_u2=0.4)
    a = np.array([[1.0, 2.0, 3.0], [0.0, -1.0, 0.5]])
    d = nuisance_score_derivative(lambda e: a @ e.nuisance_vector(), em)
    np.testing.assert_allclose(d, a, rtol=1e-9)


def test_corrected_covariance_reduces_to_sandwich_without_nuisance_effect():
    bread = np.array([[2.0, 0.3], [0.3, 1.0]])
    meat = np.array([[1.5, 0.2], [0.2, 0.8]])
    ns = NuisanceScore(np.ones((4, 3)), -np.eye(3) * 4, np.eye(3) * 0.1)
    got = nuisance_corrected_from_parts(bread, meat, np.zeros((2, 3)), ns)
    np.testing.assert_allclose(got, sandwich_from_parts(bread, meat))


def test_corrected_covariance_adds_nuisance_term():
    bread = np.eye(2)
    meat = np.eye(2)
    u_phi = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 2.0]])
    ns = NuisanceScore(np.zeros((4, 3)), -np.eye(3), np.diag([0.1, 0.2, 0.3]))
    got = nuisance_corrected_from_parts(bread, meat, u_phi, ns)
    np.testing.assert_allclose(got, np.diag([1.1, 1.0 + 4 * 0.3]))


def test_corrected_covariance_with_pairing_is_symmetric():
    rng = np.random.default_rng(0)
    res = rng.normal(size=(10, 2))
    psi = rng.normal(size=(5, 3))
    ns = NuisanceScore(psi, -5 * np.eye(3), np.eye(3) * 0.05)
    got = nuisance_corrected_from_parts(np.eye(2) * 10, res.T @ res, rng.normal(size=(2, 3)), ns,
                                        res, np.array([0, 3, -1, 7, 9]))
    np.testing.assert_allclose(got, got.T)


def test_nuisance_corrected_se_tracks_empirical_spread():
    # RC1 with an estimated error variance: the corrected SE accounts for the
    # reliability study and should match the Monte Carlo SD
    rng = np.random.default_rng(12)
    est, se_corr, se_plain = [], [], []
    for _ in range(150):
        n, m = 500, 40
        x = rng.normal(size=n)
        w = x + rng.normal(scale=0.9, size=n)
        t = rng.exponential(1 / (0.1 * np.exp(0.4 * x + 0.7 * np.maximum(x, 0))))
        co = Cohort.from_arrays(np.minimum(t, 10.0), (t <= 10).astype(int), w)
        xs = rng.normal(size=m)
        s = ReliabilityStudy(xs[:, None] + rng.normal(scale=0.9, size=(m, 2)))
        em = estimate_nuisance(s)
        fit = fit_rc(co, em, 0.0, Method.RC1, nuisance=nuisance_score(s, em))
        plain = fit_rc(co, em, 0.0, Method.RC1)
        if fit.ok and fit.covariance is not None:
            est.append(fit.theta_hat.beta)
            se_corr.append(fit.se[0])
            se_plain.append(plain.se[0])
    sd = np.std(est, ddof=1)
    assert np.mean(se_corr) == pytest.approx(sd, rel=0.2)
    assert np.mean(se_corr) > np.mean(se_plain)


def test_wald_ci_formula():
    ci = wald_ci([1.0, -2.0], np.diag([0.25, 1.0]), level=0.9)
    np.testing.assert_allclose(ci, [[1 - 1.6448536269514722 * 0.5, 1 + 1.6448536269514722 * 0.5],
                                    [-2 - 1.6448536269514722, -2 + 1.6448536269514722]])
    with pytest.raises(ValueError):
        wald_ci([0.0], np.eye(1), level=1.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5), st.floats(0.01, 3))
def test_pvalue_below_alpha_iff_ci_excludes_zero(theta, se):
    p = wald_pvalues([theta], [se])[0]
    lo, hi = wald_ci([theta], np.array([[se * se]]), 0.95)[0]
    excludes = lo > 0 or hi < 0
    if abs(p - 0.05) > 1e-9:
        assert (p < 0.05) == excludes
