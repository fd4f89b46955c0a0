"""Estimators of ``(gamma, beta, omega)`` from surrogate data.

Naive, RC1 and RC2 maximise an ordinary partial likelihood with substituted
covariates. RR1 maximises the partial likelihood of the induced relative risk
(exact under a rare disease). RR2 removes the remaining small-sample bias of
RR1 with a weighted bootstrap, SIMEX extrapolates the naive estimate back to
zero measurement error, and MPPLE (see :mod:`threshold_cox.mpple`) keeps the
conditioning on survival that RR1 drops.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from threshold_cox.domain import (
    BOX, METHOD_HIERARCHY, Cohort, EstimationError, FitResult, Method, ThetaVector,
    ThresholdCoxError, within_bound,
)
from threshold_cox.errormodel import ErrorModelParams
from threshold_cox.partial_lik import (
    InducedRelRisk, RelRisk, breslow_baseline, maximize, plugin_relrisk,
)
from threshold_cox.variance import NuisanceScore, nuisance_corrected_cov, sandwich_cov


@dataclass(frozen=True)
class BootstrapConfig:
    """Weighted bootstrap settings.

    Weights are i.i.d. unit exponentials truncated at ``truncation`` and
    rescaled to mean one within each replicate.
    """

    b: int = 100
    truncation: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.b < 1:
            raise ValueError("bootstrap needs at least one replicate")
        if not self.truncation > 0:
            raise ValueError("truncation point must be positive")


@dataclass(frozen=True)
class SimexConfig:
    """SIMEX settings: added-noise multipliers, replicates per multiplier, covariance bootstrap."""

    lambda_grid: tuple = (0.5, 1.0, 1.5, 2.0)
    b: int = 100
    cov_bootstrap: int = 50
    seed: int = 0

    def __post_init__(self):
        grid = tuple(float(v) for v in self.lambda_grid)
        if len(grid) < 3 or any(v <= 0 for v in grid) or len(set(grid)) != len(grid):
            raise ValueError("SIMEX needs at least three distinct positive noise multipliers")
        object.__setattr__(self, "lambda_grid", grid)
        if self.b < 1:
            raise ValueError("SIMEX needs at least one replicate per multiplier")


def bootstrap_weights(n: int, rng: np.random.Generator, truncation: float = 5.0) -> np.ndarray:
    """Truncated unit-exponential weights normalised to mean one."""
    kappa = np.minimum(rng.exponential(1.0, size=n), truncation)
    return kappa / kappa.mean()


def _fit_partial(cohort: Cohort, rr: RelRisk, method: Method, tau: float, theta0,
                 level: float, cov_fn=None) -> FitResult:
    q = rr.q
    theta0 = np.zeros(q) if theta0 is None else np.asarray(theta0, dtype=float)
    opt = maximize(cohort, rr, theta0)
    theta = ThetaVector.from_array(opt.theta, tau)
    fit = FitResult(method=method, theta_hat=theta, converged=opt.converged,
                    within_bound=within_bound(opt.theta), iterations=opt.iterations, level=level)
    fit.details["message"] = opt.message
    if opt.stats is None:
        return fit
    fit.details["loglik"] = opt.stats.loglik
    try:
        fit.covariance = cov_fn(opt.theta) if cov_fn else sandwich_cov(cohort, rr, opt.theta)
    except ThresholdCoxError as exc:
        fit.details["covariance_error"] = str(exc)
    fit.baseline = breslow_baseline(cohort, rr, opt.theta)
    return fit


def fit_naive(cohort: Cohort, tau: float, theta0=None, level: float = 0.95) -> FitResult:
    """Partial likelihood with the surrogate used as if it were the true covariate."""
    rr = plugin_relrisk(cohort, Method.NAIVE, None, tau)
    return _fit_partial(cohort, rr, Method.NAIVE, tau, theta0, level)


def fit_rc(cohort: Cohort, em: ErrorModelParams, tau: float, variant: str | Method = Method.RC2,
           theta0=None, nuisance: NuisanceScore | None = None, level: float = 0.95,
           pairing=None) -> FitResult:
    """Regression calibration.

    ``RC1`` substitutes ``m = E[X|W,Z]`` and ``(m - tau)_+``; ``RC2`` replaces
    the second covariate by ``E[(X - tau)_+ | W, Z]``. With ``nuisance`` the
    covariance accounts for the estimation of the error-model parameters.
    """
    variant = Method.parse(variant)
    if variant not in (Method.RC1, Method.RC2):
        raise ValueError("variant must be RC1 or RC2")
    rr = plugin_relrisk(cohort, variant, em, tau)
    cov_fn = None
    if nuisance is not None:
        def cov_fn(th):
            return nuisance_corrected_cov(
                cohort, lambda e: plugin_relrisk(cohort, variant, e, tau), th, nuisance, em, pairing)
    return _fit_partial(cohort, rr, variant, tau, theta0, level, cov_fn)


def fit_rr1(cohort: Cohort, em: ErrorModelParams, tau: float, theta0=None,
            nuisance: NuisanceScore | None = None, level: float = 0.95, pairing=None) -> FitResult:
    """Partial likelihood of the induced relative risk ``E[r(X, Z) | W, Z]``."""
    rr = InducedRelRisk(cohort, em, tau)
    cov_fn = None
    if nuisance is not None:
        def cov_fn(th):
            return nuisance_corrected_cov(
                cohort, lambda e: InducedRelRisk(cohort, e, tau), th, nuisance, em, pairing)
    return _fit_partial(cohort, rr, Method.RR1, tau, theta0, level, cov_fn)


def fit_rr2(cohort: Cohort, em: ErrorModelParams, tau: float, config: BootstrapConfig = BootstrapConfig(),
            rr1: FitResult | None = None, weights: np.ndarray | None = None,
            nuisance: NuisanceScore | None = None, level: float = 0.95) -> FitResult:
    """Bootstrap bias-corrected RR1: ``2 theta_RR1 - mean of bootstrap RR1 estimates``.

    Replicates that fail to converge or leave the bound are dropped; if more
    than half fail the fit is abandoned. The covariance is that of RR1.

    Args:
        weights: optional ``(b, n)`` array of replicate weights replacing the
            random draws.

    Raises:
        EstimationError: "bootstrap unstable" when most replicates fail.
    """
    if rr1 is None:
        rr1 = fit_rr1(cohort, em, tau, nuisance=nuisance, level=level)
    if not rr1.ok:
        raise EstimationError("RR1 fit did not converge")
    rr = InducedRelRisk(cohort, em, tau)
    base = rr1.theta_hat.as_array()
    if weights is None:
        rng = np.random.default_rng(config.seed)
        weights = (bootstrap_weights(cohort.n, rng, config.truncation) for _ in range(config.b))
        n_rep = config.b
    else:
        weights = np.atleast_2d(weights)
        n_rep = len(weights)
    shifts = []
    for kappa in weights:
        if np.all(kappa == 1.0):
            # the unit-weight replicate is the original problem
            shifts.append(np.zeros_like(base))
            continue
        opt = maximize(cohort.reweighted(kappa), rr, base)
        if opt.converged and within_bound(opt.theta):
            shifts.append(opt.theta - base)
    failed = n_rep - len(shifts)
    if failed > 0.5 * n_rep:
        raise EstimationError("bootstrap unstable")
    # averaging differences from the RR1 estimate keeps the correction exact
    # when every replicate reproduces it
    bias = np.mean(shifts, axis=0)
    theta = base - bias
    fit = FitResult(method=Method.RR2, theta_hat=ThetaVector.from_array(theta, tau),
                    covariance=rr1.covariance, converged=True, within_bound=within_bound(theta),
                    iterations=rr1.iterations, baseline=rr1.baseline, level=level)
    fit.details.update(bootstrap_failures=failed, bootstrap_bias=bias)
    return fit


def _simex_curve(cohort: Cohort, sigma_u2: float, tau: float, config: SimexConfig,
                 rng: np.random.Generator, start) -> tuple[np.ndarray, np.ndarray]:
    naive = fit_naive(cohort, tau, theta0=start)
    if not naive.ok:
        raise EstimationError("naive fit failed inside SIMEX")
    theta0 = naive.theta_hat.as_array()
    n_meas = int(cohort.w_measurement.max()) + 1
    sigma_u = np.sqrt(sigma_u2)
    means = [theta0]
    for zeta in config.lambda_grid:
        ests = []
        for _ in range(config.b):
            noise = rng.standard_normal(n_meas)[cohort.w_measurement]
            noisy = cohort.with_w(cohort.w + np.sqrt(zeta) * sigma_u * noise)
            rr = plugin_relrisk(noisy, Method.NAIVE, None, tau)
            opt = maximize(noisy, rr, theta0)
            if opt.converged and within_bound(opt.theta):
                ests.append(opt.theta)
        if len(ests) < 0.5 * config.b:
            raise EstimationError("SIMEX grid unstable")
        means.append(np.mean(ests, axis=0))
    zetas = np.array((0.0,) + config.lambda_grid)
    return zetas, np.array(means)


def simex_extrapolate(zetas, means, at: float = -1.0) -> np.ndarray:
    """Least-squares cubic in the noise multiplier per component, evaluated at ``at``."""
    zetas = np.asarray(zetas, dtype=float)
    means = np.asarray(means, dtype=float)
    design = np.vander(zetas, 4)
    coef, *_ = np.linalg.lstsq(design, means, rcond=None)
    return np.vander(np.atleast_1d(float(at)), 4) @ coef


def fit_simex(cohort: Cohort, em: ErrorModelParams, tau: float, config: SimexConfig = SimexConfig(),
              theta0=None, level: float = 0.95) -> FitResult:
    """Simulation-extrapolation estimate built on the naive fit.

    The covariance comes from a weighted bootstrap of the whole procedure and
    is omitted when ``config.cov_bootstrap`` is zero.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(config.cov_bootstrap + 1)
    zetas, means = _simex_curve(cohort, em.sigma_u2, tau, config, np.random.default_rng(seeds[0]), theta0)
    theta = simex_extrapolate(zetas, means)[0]
    fit = FitResult(method=Method.SIMEX, theta_hat=ThetaVector.from_array(theta, tau),
                    converged=True, within_bound=within_bound(theta), level=level)
    fit.details.update(zetas=zetas, curve=means)
    if config.cov_bootstrap:
        reps = []
        for ss in seeds[1:]:
            rng = np.random.default_rng(ss)
            boot = cohort.reweighted(bootstrap_weights(cohort.n, rng))
            try:
                z_b, m_b = _simex_curve(boot, em.sigma_u2, tau, config, rng, means[0])
            except EstimationError:
                continue
            reps.append(simex_extrapolate(z_b, m_b)[0])
        fit.details["bootstrap_replicates"] = len(reps)
        if len(reps) >= 2:
            fit.covariance = np.atleast_2d(np.cov(np.array(reps), rowvar=False))
    return fit


def fit_methods(cohort: Cohort, em: ErrorModelParams | None, tau: float, methods,
                nuisance: NuisanceScore | None = None,
                bootstrap: BootstrapConfig = BootstrapConfig(),
                simex: SimexConfig = SimexConfig(), level: float = 0.95,
                mpple_covariance: str = "ij") -> dict:
    """Fit several methods, each started from the estimate of its predecessor.

    The order is Naive, RC1, RC2, RR1, RR2, MPPLE, SIMEX. A method that raises
    is reported as a non-converged :class:`FitResult` with the error message in
    ``details["error"]``; the others carry on.
    """
    from threshold_cox.mpple import fit_mpple

    wanted = {Method.parse(m) for m in methods}
    if em is None and wanted - {Method.NAIVE}:
        raise ValueError("correction methods need error-model parameters")
    q = cohort.p + 2
    results: dict = {}
    start = np.zeros(q)

    def record(method, thunk):
        nonlocal start
        try:
            fit = thunk()
        except ThresholdCoxError as exc:
            fit = FitResult(method=method, theta_hat=ThetaVector.from_array(np.full(q, np.nan), tau),
                            level=level)
            fit.details["error"] = str(exc)
        if fit.ok and method is not Method.SIMEX and method is not Method.RR2:
            start = fit.theta_hat.as_array()
        return fit

    naive = record(Method.NAIVE, lambda: fit_naive(cohort, tau, level=level))
    if Method.NAIVE in wanted:
        results[Method.NAIVE] = naive
    rr1 = None
    for method in METHOD_HIERARCHY[1:]:
        if method not in wanted and not (method is Method.RR1 and wanted & {Method.RR2, Method.MPPLE}):
            continue
        s = start.copy()
        if method in (Method.RC1, Method.RC2):
            fit = record(method, lambda: fit_rc(cohort, em, tau, method, s, nuisance, level))
        elif method is Method.RR1:
            fit = rr1 = record(method, lambda: fit_rr1(cohort, em, tau, s, nuisance, level))
        elif method is Method.RR2:
            fit = record(method, lambda: fit_rr2(cohort, em, tau, bootstrap, rr1, level=level))
        elif method is Method.MPPLE:
            fit = record(method, lambda: fit_mpple(cohort, em, tau, s, covariance=mpple_covariance,
                                                   nuisance=nuisance, level=level,
                                                   bootstrap=bootstrap))
        else:
            s0 = naive.theta_hat.as_array() if naive.ok else None
            fit = record(method, lambda: fit_simex(cohort, em, tau, simex, s0, level))
        if method in wanted:
            results[method] = fit
    return results


def rare_disease_warning(cohort: Cohort, methods, threshold: float = 0.1) -> None:
    """Warn when RR methods are used although events are not rare."""
    wanted = {Method.parse(m) for m in methods}
    frac = cohort.event.sum() / cohort.n
    if wanted & {Method.RR1, Method.RR2} and frac > threshold:
        warnings.warn(f"event fraction {frac:.3f} is not small; RR1/RR2 rely on a rare disease",
                      RuntimeWarning, stacklevel=2)
