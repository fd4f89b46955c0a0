"""Sandwich covariance, nuisance corrections and Wald inference."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import ndtr, ndtri

from threshold_cox.domain import Cohort, EstimationError
from threshold_cox.errormodel import ErrorModelParams, ReliabilityStudy
from threshold_cox.partial_lik import RelRisk, evaluate, score_residuals


def sandwich_from_parts(bread: np.ndarray, meat: np.ndarray) -> np.ndarray:
    """``bread^-1 meat bread^-T``, symmetrised."""
    try:
        inv = np.linalg.inv(bread)
    except np.linalg.LinAlgError:
        raise EstimationError("singular information") from None
    if not np.all(np.isfinite(inv)):
        raise EstimationError("singular information")
    cov = inv @ meat @ inv.T
    return 0.5 * (cov + cov.T)


def sandwich_cov(cohort: Cohort, rr: RelRisk, theta) -> np.ndarray:
    """Robust covariance of a maximum partial likelihood estimate.

    The bread is the observed information and the meat is built from the
    per-subject score residuals, so the estimator stays valid when the working
    relative risk is only an approximation.
    """
    st = evaluate(cohort, rr, theta, order=2)
    h = score_residuals(cohort, rr, theta, stats=st)
    hw = h * cohort.weight[:, None]
    return sandwich_from_parts(st.information, hw.T @ hw)


@dataclass(frozen=True)
class NuisanceScore:
    """Estimating functions of the reliability-study moment estimator.

    ``psi`` holds one row per reliability subject for the nuisance coordinates
    ``(alpha0, sigma_x2, sigma_u2)``; ``jacobian`` is the summed derivative of
    ``psi`` and ``cov_phi`` the resulting sandwich covariance of the estimate.
    """

    psi: np.ndarray
    jacobian: np.ndarray
    cov_phi: np.ndarray

    @property
    def m(self) -> int:
        return self.psi.shape[0]


def nuisance_score(study: ReliabilityStudy, em: ErrorModelParams) -> NuisanceScore:
    """Estimating functions whose root is the one-way ANOVA estimate.

    Per subject ``i`` with mean ``wbar_i`` and within-subject variance ``s2_i``:
    ``wbar_i - a0``, ``m/(m-1) (wbar_i - a0)^2 - sx2 - su2/k`` and ``s2_i - su2``.
    Covariate-adjusted studies (``alpha1`` non-empty) are not covered.
    """
    if em.alpha1:
        raise ValueError("nuisance score is implemented for studies without covariates")
    w = study.measurements
    m, k = w.shape
    a0, sx2, su2 = em.nuisance_vector()
    means = w.mean(axis=1)
    s2 = w.var(axis=1, ddof=1)
    dev = means - a0
    c = m / (m - 1.0)
    psi = np.column_stack([dev, c * dev**2 - sx2 - su2 / k, s2 - su2])
    jac = np.array([
        [-m, 0.0, 0.0],
        [-2.0 * c * dev.sum(), -m, -m / k],
        [0.0, 0.0, -m],
    ])
    cov = sandwich_from_parts(jac, psi.T @ psi)
    return NuisanceScore(psi=psi, jacobian=jac, cov_phi=cov)


def nuisance_score_derivative(score_fn: Callable[[ErrorModelParams], np.ndarray],
                              em: ErrorModelParams, rel_step: float = 1e-4) -> np.ndarray:
    """Central-difference derivative of a main-study score in the nuisance vector.

    Returns a ``(q, 3)`` matrix; columns follow ``(alpha0, sigma_x2, sigma_u2)``.
    """
    phi = em.nuisance_vector()
    cols = []
    for j in range(3):
        h = rel_step * max(abs(phi[j]), 1e-2)
        up, down = phi.copy(), phi.copy()
        up[j] += h
        down[j] -= h
        if j > 0 and down[j] <= 0:
            down[j] = phi[j]
            cols.append((score_fn(em.with_nuisance(up)) - score_fn(em)) / h)
            continue
        cols.append((score_fn(em.with_nuisance(up)) - score_fn(em.with_nuisance(down))) / (2 * h))
    return np.column_stack(cols)


def nuisance_corrected_from_parts(bread: np.ndarray, meat: np.ndarray, u_phi: np.ndarray,
                                  ns: NuisanceScore, residuals: np.ndarray | None = None,
                                  pairing: np.ndarray | None = None) -> np.ndarray:
    """Covariance that adds the uncertainty of estimated nuisance parameters.

    The main-study score is linearised in the nuisance vector; its
    contribution ``U_phi Cov(phi) U_phi'`` enters the meat. When the same
    subjects appear in both studies (``pairing[j]`` is the main-study index of
    reliability subject ``j``, or -1), the covariance between the two sets of
    estimating functions is subtracted as well; otherwise the studies are
    treated as independent and the cross term vanishes.
    """
    total = meat + u_phi @ ns.cov_phi @ u_phi.T
    if pairing is not None and residuals is not None:
        pairing = np.asarray(pairing)
        shared = pairing >= 0
        cross = residuals[pairing[shared]].T @ ns.psi[shared]
        term = cross @ np.linalg.inv(ns.jacobian).T @ u_phi.T
        total = total - (term + term.T)
    return sandwich_from_parts(bread, total)


def nuisance_corrected_cov(cohort: Cohort, rr_builder: Callable[[ErrorModelParams], RelRisk],
                           theta, ns: NuisanceScore, em: ErrorModelParams,
                           pairing: np.ndarray | None = None) -> np.ndarray:
    """Sandwich covariance of a partial likelihood fit with estimated nuisance.

    Args:
        rr_builder: maps error-model parameters to the working relative risk.
        ns: estimating functions of the reliability study.
        em: the estimated error-model parameters used for the fit.
        pairing: optional main-study index of each reliability subject.
    """
    rr = rr_builder(em)
    st = evaluate(cohort, rr, theta, order=2)
    h = score_residuals(cohort, rr, theta, stats=st) * cohort.weight[:, None]
    u_phi = nuisance_score_derivative(lambda e: evaluate(cohort, rr_builder(e), theta, order=1).score, em)
    return nuisance_corrected_from_parts(st.information, h.T @ h, u_phi, ns, h, pairing)


def _z_value(level: float) -> float:
    if not 0.0 <= level < 1.0:
        raise ValueError("confidence level must lie in [0, 1)")
    return float(ndtri(0.5 + 0.5 * level))


def wald_ci(theta, covariance, level: float = 0.95) -> np.ndarray:
    """Symmetric normal-theory intervals, one row ``(lower, upper)`` per component."""
    theta = np.asarray(theta, dtype=float)
    z = _z_value(level)
    if covariance is None:
        return np.full((len(theta), 2), np.nan)
    se = np.sqrt(np.clip(np.diag(covariance), 0.0, None))
    return np.column_stack([theta - z * se, theta + z * se])


def wald_pvalues(theta, se) -> np.ndarray:
    """Two-sided p-values for ``H0: component = 0``."""
    theta = np.asarray(theta, dtype=float)
    se = np.asarray(se, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        stat = np.abs(theta) / se
    return 2.0 * ndtr(-stat)
