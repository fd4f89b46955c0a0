"""Cox regression with a known covariate threshold under measurement error."""

from threshold_cox.asymptotics import LimitScenario, asymptotic_bias, limiting_score, limiting_theta
from threshold_cox.concordance import MarkerSpec, c_index
from threshold_cox.domain import (
    Baseline, Cohort, DegenerateRiskSetError, EstimationError, FitResult, Method, StepPath, Subject,
    ThetaVector, ThresholdCoxError, threshold_from_quantile,
)
from threshold_cox.errormodel import (
    ErrorModelParams, ReliabilityStudy, cond_plus_mean, estimate_nuisance, rr_cond_expectation,
    rr_cond_gradient, rr_cond_hessian,
)
from threshold_cox.estimators import (
    BootstrapConfig, SimexConfig, fit_methods, fit_naive, fit_rc, fit_rr1, fit_rr2, fit_simex,
)
from threshold_cox.mpple import fit_mpple
from threshold_cox.partial_lik import breslow_baseline, log_partial_likelihood, maximize, score
from threshold_cox.simulate import ScenarioSpec, calibrate_lambda0, run_scenario
from threshold_cox.variance import nuisance_score, sandwich_cov, wald_ci

__all__ = [
    "Baseline", "BootstrapConfig", "Cohort", "DegenerateRiskSetError", "ErrorModelParams",
    "EstimationError", "FitResult", "LimitScenario", "MarkerSpec", "Method", "ReliabilityStudy",
    "ScenarioSpec", "SimexConfig", "StepPath", "Subject", "ThetaVector", "ThresholdCoxError",
    "asymptotic_bias", "breslow_baseline", "c_index", "calibrate_lambda0", "cond_plus_mean",
    "estimate_nuisance", "fit_methods", "fit_mpple", "fit_naive", "fit_rc", "fit_rr1", "fit_rr2",
    "fit_simex", "limiting_score", "limiting_theta", "log_partial_likelihood", "maximize",
    "nuisance_score", "rr_cond_expectation", "rr_cond_gradient", "rr_cond_hessian",
    "run_scenario", "sandwich_cov", "score", "threshold_from_quantile", "wald_ci",
]
