import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from threshold_cox.domain import (
    BOUND_CHECK, Cohort, FitResult, Method, StepFunction, StepPath, Subject, ThetaVector,
    ThresholdCoxError, as_methods, relative_risk, threshold_from_quantile, within_bound,
)


def test_method_parse_accepts_names_and_rejects_unknown():
    assert Method.parse("rr1") is Method.RR1
    assert Method.parse("MPPLE") is Method.MPPLE
    assert str(Method.NAIVE) == "Naive"
    with pytest.raises(ValueError):
        Method.parse("RC3")


def test_as_methods_orders_by_hierarchy_and_deduplicates():
    assert as_methods(["SIMEX", "naive", "RR1", "Naive"]) == [Method.NAIVE, Method.RR1, Method.SIMEX]


def test_threshold_from_quantile_is_normal_quantile():
    assert threshold_from_quantile(0.5) == 0.0
    assert threshold_from_quantile(0.25) == pytest.approx(-0.6744897501960817, abs=1e-15)


def test_step_path_uses_value_recorded_strictly_before():
    path = StepPath([0.0, 2.0, 5.0], [1.0, 3.0, 7.0])
    assert path(0.5) == 1.0
    assert path(2.0) == 1.0     # recorded at 2 takes effect after 2
    assert path(2.0001) == 3.0
    assert path(100.0) == 7.0
    with pytest.raises(ThresholdCoxError, match="no covariate history"):
        path(0.0)


def test_step_path_rejects_unsorted_grid():
    with pytest.raises(ValueError):
        StepPath([0.0, 0.0], [1.0, 2.0])


def test_subject_validation():
    with pytest.raises(ValueError):
        Subject(1, 2.0, 1.0, 0, StepPath.constant(0.0))
    with pytest.raises(ValueError):
        Subject(1, 0.0, 1.0, 2, StepPath.constant(0.0))


def test_cohort_from_subjects_splits_at_path_changes():
    s1 = Subject("a", 0.0, 5.0, 1, StepPath([0.0, 2.0], [1.0, 4.0]))
    s2 = Subject("b", 1.0, 3.0, 0, StepPath([0.0], [2.0]))
    co = Cohort.from_subjects([s1, s2])
    assert co.n == 2 and co.n_rows == 3
    np.testing.assert_array_equal(co.start, [0.0, 2.0, 1.0])
    np.testing.assert_array_equal(co.stop, [2.0, 5.0, 3.0])
    np.testing.assert_array_equal(co.w, [1.0, 4.0, 2.0])
    np.testing.assert_array_equal(co.row_event, [0, 1, 0])
    assert not co.time_fixed
    np.testing.assert_array_equal(co.first_row, [0, 2])


def test_cohort_from_subjects_requires_history_at_entry():
    s = Subject("a", 0.0, 5.0, 1, StepPath([1.0], [1.0]))
    with pytest.raises(ThresholdCoxError):
        Cohort.from_subjects([s])


def test_cohort_round_trips_through_subjects():
    co = Cohort.from_arrays([3.0, 1.0, 2.0], [1, 0, 1], [0.1, -0.2, 0.4], [[1.0], [2.0], [3.0]],
                            entry=[0.0, 0.5, 0.0])
    back = Cohort.from_subjects(co.subjects)
    np.testing.assert_array_equal(back.exit, co.exit)
    np.testing.assert_array_equal(back.w, co.w)
    np.testing.assert_array_equal(back.z, co.z)


def test_theta_vector_round_trip_and_names():
    th = ThetaVector.from_array([0.1, 0.2, 0.3, 0.4], tau=0.5)
    assert th.gamma == (0.1, 0.2) and th.beta == 0.3 and th.omega == 0.4 and th.tau == 0.5
    np.testing.assert_array_equal(th.as_array(), [0.1, 0.2, 0.3, 0.4])
    assert ThetaVector.names(2) == ["gamma1", "gamma2", "beta", "omega"]


def test_relative_risk_has_kink_at_threshold():
    th = ThetaVector(beta=0.5, omega=1.0, tau=1.0)
    r = relative_risk(th, np.array([0.0, 1.0, 2.0]))
    np.testing.assert_allclose(np.log(r), [0.0, 0.5, 2.0])


def test_step_function_right_continuous_with_left_limit():
    f = StepFunction(np.array([1.0, 3.0]), np.array([0.2, 0.5]))
    assert f(0.5) == 0.0 and f(1.0) == 0.2 and f(3.0) == 0.5
    assert f.left_limit(1.0) == 0.0 and f.left_limit(3.0) == 0.2


def test_within_bound_filter():
    assert within_bound(np.array([BOUND_CHECK, -1.0]))
    assert not within_bound(np.array([BOUND_CHECK + 1e-9]))
    assert not within_bound(np.array([np.nan]))


def test_fit_result_se_and_ci():
    fit = FitResult(Method.NAIVE, ThetaVector(beta=1.0, omega=0.0), covariance=np.diag([0.04, 0.01]),
                    converged=True, within_bound=True)
    np.testing.assert_allclose(fit.se, [0.2, 0.1])
    np.testing.assert_allclose(fit.ci[0], [1.0 - 1.959963984540054 * 0.2, 1.0 + 1.959963984540054 * 0.2])
    assert fit.ok


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 10.0), min_size=2, max_size=8, unique=True), st.floats(0.0, 20.0))
def test_step_lookup_matches_linear_scan(times, t):
    times = sorted(times)
    values = list(range(len(times)))
    path = StepPath(times, values)
    before = [v for s, v in zip(times, values) if s < t]
    if not before:
        with pytest.raises(ThresholdCoxError):
            path(t)
    else:
        assert path(t) == before[-1]
