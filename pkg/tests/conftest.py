import pytest

from threshold_cox.simulate import ScenarioSpec, run_scenario

# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
_ACCEPTANCE: dict = {}

# shared design of the common-disease reproduction runs
COMMON = dict(n=3000, cum_incidence=0.5, t_star=10.0, tau_quantile=0.5, nuisance="known",
              reps=250, seed=2026)


@pytest.fixture(scope="session")
def acceptance_report():
    def record(criterion: int, passed: bool, detail: str = "") -> bool:
        line = f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE[criterion] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])


@pytest.fixture(scope="session")
def common_disease_runs():
    """Scaled common-disease simulations at rho 0.8 (Naive, RC1, RC2) and rho 0.6 (Naive)."""
    hi = run_scenario(ScenarioSpec(rho_xw=0.8, methods=("Naive", "RC1", "RC2"), **COMMON))
    lo = run_scenario(ScenarioSpec(rho_xw=0.6, methods=("Naive",), **COMMON))
    return {0.8: hi, 0.6: lo}
