import math

import numpy as np
import pytest
from scipy import stats

from threshold_cox.simulate import (
    REPLICATE_COLUMNS, ScenarioSpec, boxplot_rows, calibrate_lambda0, format_value,
    generate_cohort, generate_reliability_study, replicate_rng, rows_to_csv, run_scenario,
    summarize, two_variable_moments, x_distribution,
)


@pytest.mark.parametrize("name", ["Normal", "T6", "T15", "LogGamma11"])
def test_x_distributions_are_standardised(name):
    d = x_distribution(name)
    assert d.mean() == pytest.approx(0.0, abs=1e-12)
    assert d.var() == pytest.approx(1.0, rel=1e-12)


def test_loggamma_is_log_of_exponential():
    # P(log E <= y) = 1 - exp(-e^y) before standardisation
    d = x_distribution("LogGamma11")
    sd = math.pi / math.sqrt(6)
    y = 0.3
    assert d.cdf((y + np.euler_gamma) / sd) == pytest.approx(-math.expm1(-math.exp(y)), rel=1e-12)


def test_calibration_closed_form_without_effects():
    sc = ScenarioSpec(beta0=0.0, omega0=0.0, cum_incidence=0.3, t_star=5.0)
    assert calibrate_lambda0(sc) == pytest.approx(-math.log(0.7) / 5.0, rel=1e-10)


def test_calibration_matches_monte_carlo_incidence():
    sc = ScenarioSpec(beta0=math.log(1.5), omega0=math.log(2), gamma0=(0.5,), cum_incidence=0.2,
                      tau_quantile=0.25, x_dist="T6")
    lam = calibrate_lambda0(sc)
    rng = np.random.default_rng(0)
    x = x_distribution("T6").rvs(size=1_000_000, random_state=rng)
    z = rng.standard_normal(1_000_000)
    h = sc.beta0 * x + sc.omega0 * np.maximum(x - sc.tau, 0) + 0.5 * z
    p = -np.expm1(-sc.t_star * lam * np.exp(h))
    assert p.mean() == pytest.approx(0.2, abs=4 * p.std() / 1000)


def test_generated_cohort_has_requested_structure():
    sc = ScenarioSpec(n=20_000, beta0=0.4, omega0=0.7, rho_xw=0.8, cum_incidence=0.3)
    co = generate_cohort(sc, calibrate_lambda0(sc), np.random.default_rng(1))
    assert co.event.mean() == pytest.approx(0.3, abs=0.015)
    assert np.corrcoef(co.x, co.w)[0, 1] == pytest.approx(0.8, abs=0.01)
    assert co.exit.max() <= sc.t_star and np.all(co.exit[co.event == 0] == sc.t_star)


def test_reliability_study_shape_and_error_variance():
    sc = ScenarioSpec(beta0=0.4, omega0=0.7, rho_xw=0.6, reliability=(4000, 3))
    study = generate_reliability_study(sc, np.random.default_rng(2))
    assert study.measurements.shape == (4000, 3)
    within = study.measurements.var(axis=1, ddof=1).mean()
    assert within == pytest.approx(sc.sigma_u2, rel=0.05)


def test_scenario_validation():
    with pytest.raises(ValueError):
        ScenarioSpec(beta0=0, omega0=0, rho_xw=0.0)
    with pytest.raises(ValueError):
        ScenarioSpec(beta0=0, omega0=0, x_dist="Cauchy")
    with pytest.raises(ValueError):
        ScenarioSpec.from_dict({"beta0": 0, "omega0": 0, "bogus": 1})
    assert ScenarioSpec(beta0=0, omega0=0, methods=["rr1", "naive"]).methods == ("Naive", "RR1")


def test_replicate_streams_are_independent_of_order():
    a = replicate_rng(3, 7).standard_normal(3)
    replicate_rng(3, 6).standard_normal(100)
    np.testing.assert_array_equal(a, replicate_rng(3, 7).standard_normal(3))
    assert not np.array_equal(a, replicate_rng(3, 8).standard_normal(3))


SMALL = ScenarioSpec(n=300, beta0=math.log(1.5), omega0=math.log(2), reps=4, cum_incidence=0.3,
                     methods=("Naive", "RC1", "RR1"), seed=11)


@pytest.fixture(scope="module")
def small_run():
    return run_scenario(SMALL, workers=1)


def test_run_scenario_is_deterministic_and_worker_invariant(small_run):
    again = run_scenario(SMALL, workers=2)
    a = rows_to_csv(small_run.replicates, REPLICATE_COLUMNS)
    assert a == rows_to_csv(again.replicates, REPLICATE_COLUMNS)


def test_summary_statistics(small_run):
    row = small_run.summary.get("RC1", "omega")
    ests = [r["estimate"] for r in small_run.replicates if r["method"] == "RC1" and r["parameter"] == "omega"]
    assert row["n_reps"] == 4 and row["n_used"] == 4
    assert row["mean"] == pytest.approx(np.mean(ests), abs=1e-14)
    assert row["emp_sd"] == pytest.approx(np.std(ests, ddof=1), rel=1e-12)
    assert row["rel_bias_mean"] == pytest.approx((np.mean(ests) - math.log(2)) / math.log(2))
    assert row["mc_se_mean"] == pytest.approx(row["emp_sd"] / 2)


def test_summary_drops_failed_replicates():
    rows = []
    for rep, (est, ok) in enumerate([(1.0, True), (3.0, True), (100.0, False)]):
        for p in ("beta", "omega"):
            rows.append({"method": "Naive", "parameter": p, "truth": 2.0, "estimate": est, "se": 0.5,
                         "ci_lower": est - 1, "ci_upper": est + 1, "converged": ok, "within_bound": True})
    sc = ScenarioSpec(beta0=2.0, omega0=2.0, methods=("Naive",))
    row = summarize(sc, rows).get("Naive", "beta")
    assert row["n_used"] == 2 and row["convergence_pct"] == pytest.approx(2 / 3)
    assert row["mean"] == 2.0 and row["coverage"] == 1.0


def test_boxplot_rows(small_run):
    box = boxplot_rows(small_run)
    assert len(box) == len(small_run.summary.rows)
    for r in box:
        assert r["box_lower"] <= r["median"] <= r["box_upper"]


def test_format_value():
    assert format_value(float("nan")) == "NA"
    assert format_value(0.1) == "0.1"
    assert format_value(np.float64(1 / 3)) == repr(1 / 3)
    assert format_value(True) == "1"


def test_two_variable_moments_are_consistent():
    sc = ScenarioSpec(beta0=0.4, omega0=0.7, setting="two_variable", rho_xw=0.8)
    mean, cov = two_variable_moments(sc, draws=200_000)
    assert mean[0] == pytest.approx(0.0, abs=0.01)
    assert mean[1] == pytest.approx(stats.norm.pdf(0.0), abs=0.01)  # E X_+ at tau = 0
    assert cov[2, 2] == pytest.approx(1 / 0.64, rel=0.02)
    assert np.all(np.linalg.eigvalsh(cov) >= -1e-12)
