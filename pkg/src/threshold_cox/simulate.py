"""Monte Carlo simulation of cohorts with a mismeasured threshold covariate.

Event times are exponential with rate ``lambda0 exp(gamma'Z + beta X +
omega (X - tau)_+)`` and administratively censored at ``t_star``; ``lambda0``
is calibrated so that the cumulative incidence by ``t_star`` hits a target.
The surrogate is ``W = X + U``. Besides this "changepoint" design there is a
"two_variable" design in which ``(X1, X2, W1, W2)`` is multivariate normal with
the moments of ``(X, (X - tau)_+, W, (W - tau)_+)``, which isolates what is
specific to the deterministic link between the two threshold terms.
"""

from __future__ import annotations

import csv
import io
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import integrate, optimize, stats

from threshold_cox.domain import (
    Cohort, FitResult, Method, ThetaVector, ThresholdCoxError, as_methods, threshold_from_quantile,
    within_bound,
)
from threshold_cox.errormodel import ErrorModelParams, ReliabilityStudy, estimate_nuisance
from threshold_cox.estimators import BootstrapConfig, SimexConfig, fit_methods
from threshold_cox.partial_lik import ExponentialRelRisk
from threshold_cox.variance import nuisance_score

X_DISTRIBUTIONS = ("Normal", "T6", "T15", "LogGamma11")
SETTINGS = ("changepoint", "two_variable")


def x_distribution(name: str):
    """Frozen scipy distribution with mean 0 and variance 1.

    ``T6``/``T15`` are Student t scaled by ``sqrt((df - 2) / df)``;
    ``LogGamma11`` is the log of a Gamma(1, 1) variable, standardised by its
    exact mean ``-euler_gamma`` and variance ``pi^2 / 6``.
    """
    if name == "Normal":
        return stats.norm()
    if name in ("T6", "T15"):
        df = int(name[1:])
        return stats.t(df, scale=math.sqrt((df - 2) / df))
    if name == "LogGamma11":
        sd = math.pi / math.sqrt(6.0)
        return stats.loggamma(1.0, loc=np.euler_gamma / sd, scale=1.0 / sd)
    raise ValueError(f"unknown distribution {name!r}")


@dataclass(frozen=True)
class ScenarioSpec:
    """One simulation design.

    ``rho_xw`` is the correlation between X and W; 1 means no measurement
    error. ``nuisance`` is ``"known"`` (true error variance supplied to the
    corrections) or ``"estimated"`` (from a simulated reliability study of
    ``reliability = (m, k)``).
    """

    n: int = 3000
    cum_incidence: float = 0.5
    t_star: float = 10.0
    beta0: float = math.log(1.5)
    omega0: float = math.log(2.0)
    gamma0: tuple = ()
    tau_quantile: float = 0.5
    rho_xw: float = 0.8
    x_dist: str = "Normal"
    reliability: tuple = (500, 2)
    reps: int = 100
    methods: tuple = ("Naive", "RC1", "RC2", "RR1")
    nuisance: str = "known"
    seed: int = 0
    setting: str = "changepoint"
    bootstrap_b: int = 50
    simex_b: int = 100
    simex_cov_bootstrap: int = 0
    mpple_covariance: str = "ij"
    level: float = 0.95
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "gamma0", tuple(float(g) for g in self.gamma0))
        object.__setattr__(self, "reliability", tuple(int(v) for v in self.reliability))
        object.__setattr__(self, "methods", tuple(str(m) for m in as_methods(self.methods)))
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if not 0 < self.cum_incidence < 1:
            raise ValueError("cum_incidence must lie in (0, 1)")
        if not self.t_star > 0:
            raise ValueError("t_star must be positive")
        if not 0 < self.tau_quantile < 1:
            raise ValueError("tau_quantile must lie in (0, 1)")
        if not 0 < self.rho_xw <= 1:
            raise ValueError("rho_xw must lie in (0, 1]")
        if self.x_dist not in X_DISTRIBUTIONS:
            raise ValueError(f"x_dist must be one of {X_DISTRIBUTIONS}")
        if self.nuisance not in ("known", "estimated"):
            raise ValueError("nuisance must be 'known' or 'estimated'")
        if self.setting not in SETTINGS:
            raise ValueError(f"setting must be one of {SETTINGS}")
        if len(self.reliability) != 2 or self.reliability[0] < 3 or self.reliability[1] < 2:
            raise ValueError("reliability must be (m >= 3, k >= 2)")
        if self.reps < 1:
            raise ValueError("reps must be positive")
        if self.setting == "two_variable" and (self.gamma0 or self.x_dist != "Normal"):
            raise ValueError("the two-variable design has no extra covariates and normal X")
        if self.nuisance == "estimated" and self.rho_xw == 1:
            raise ValueError("an error-free design has no error variance to estimate")

    @property
    def tau(self) -> float:
        return threshold_from_quantile(self.tau_quantile)

    @property
    def sigma_u2(self) -> float:
        return 1.0 / self.rho_xw**2 - 1.0

    @property
    def truth(self) -> np.ndarray:
        return np.array([*self.gamma0, self.beta0, self.omega0])

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        return (f"{self.setting}_n{self.n}_ci{self.cum_incidence:g}_q{self.tau_quantile:g}"
                f"_rho{self.rho_xw:g}_{self.x_dist}_{self.nuisance}")

    def known_error_model(self) -> ErrorModelParams:
        return ErrorModelParams(alpha0=0.0, sigma_x2=1.0, sigma_u2=self.sigma_u2)

    @classmethod
    def from_dict(cls, data: dict) -> ScenarioSpec:
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**data)


def _gamma_nodes(gamma: tuple, n_nodes: int = 20):
    """Nodes and weights for ``gamma'Z`` with ``Z ~ N(0, I)``."""
    if not gamma:
        return np.zeros(1), np.ones(1)
    sd = float(np.linalg.norm(gamma))
    t, w = np.polynomial.hermite.hermgauss(n_nodes)
    return np.sqrt(2.0) * sd * t, w / np.sqrt(np.pi)


def _incidence(lambda0: float, sc: ScenarioSpec, moments=None) -> float:
    """Cumulative incidence by ``t_star`` for a given baseline hazard."""
    if sc.setting == "two_variable":
        mean, cov = moments
        coef = np.array([sc.beta0, sc.omega0])
        m = float(coef @ mean[:2])
        s = float(np.sqrt(coef @ cov[:2, :2] @ coef))

        def integrand(u):
            return -np.expm1(-sc.t_star * lambda0 * np.exp(np.minimum(m + s * u, 700.0))) * stats.norm.pdf(u)
        val, _ = integrate.quad(integrand, -np.inf, np.inf, epsabs=1e-14, epsrel=1e-12, limit=200)
        return val

    dist = x_distribution(sc.x_dist)
    tau = sc.tau
    znodes, zweights = _gamma_nodes(sc.gamma0)

    def integrand(x):
        h = np.minimum(sc.beta0 * x + sc.omega0 * max(x - tau, 0.0) + znodes, 700.0)
        return -np.expm1(-sc.t_star * lambda0 * np.exp(h)) * dist.pdf(x)

    # split at the kink; Z is integrated by Gauss-Hermite nodes carried as a vector
    with np.errstate(over="ignore", under="ignore"):
        lo, _ = integrate.quad_vec(integrand, -np.inf, tau, epsabs=1e-14, epsrel=1e-12, limit=400)
        hi, _ = integrate.quad_vec(integrand, tau, np.inf, epsabs=1e-14, epsrel=1e-12, limit=400)
    return float(zweights @ (lo + hi))


def calibrate_lambda0(sc: ScenarioSpec, moments=None) -> float:
    """Baseline hazard giving cumulative incidence ``sc.cum_incidence`` by ``t_star``."""
    if sc.setting == "two_variable" and moments is None:
        moments = two_variable_moments(sc)
    target = sc.cum_incidence

    def gap(log_lam):
        return _incidence(math.exp(log_lam), sc, moments) - target

    # the incidence is increasing in lambda0, so widen a bracket on the log scale
    lo = math.log(-math.log1p(-target) / sc.t_star)
    hi = lo
    while gap(lo) > 0:
        lo -= 2.0
    while gap(hi) < 0:
        hi += 2.0
    if lo == hi:
        return math.exp(lo)
    root = optimize.brentq(gap, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=200)
    return math.exp(root)


def _draw(dist_name: str, size, rng: np.random.Generator) -> np.ndarray:
    if dist_name == "Normal":
        return rng.standard_normal(size)
    return x_distribution(dist_name).rvs(size=size, random_state=rng)


def generate_cohort(sc: ScenarioSpec, lambda0: float, rng: np.random.Generator) -> Cohort:
    """Changepoint-design cohort with the true covariate retained in ``x``."""
    n = sc.n
    x = _draw(sc.x_dist, n, rng)
    z = rng.standard_normal((n, len(sc.gamma0))) if sc.gamma0 else None
    lin = sc.beta0 * x + sc.omega0 * np.maximum(x - sc.tau, 0.0)
    if z is not None:
        lin = lin + z @ np.asarray(sc.gamma0)
    t_event = rng.exponential(1.0, n) / (lambda0 * np.exp(lin))
    u = math.sqrt(sc.sigma_u2) * _draw(sc.x_dist, n, rng)
    w = x + u
    event = (t_event <= sc.t_star).astype(np.int8)
    exit_ = np.maximum(np.minimum(t_event, sc.t_star), np.finfo(float).tiny)
    return Cohort.from_arrays(exit_, event, w, z, x=x, t_star=sc.t_star)


def generate_reliability_study(sc: ScenarioSpec, rng: np.random.Generator) -> ReliabilityStudy:
    m, k = sc.reliability
    x = _draw(sc.x_dist, m, rng)
    u = math.sqrt(sc.sigma_u2) * _draw(sc.x_dist, (m, k), rng)
    return ReliabilityStudy(x[:, None] + u)


def two_variable_moments(sc: ScenarioSpec, draws: int = 1_000_000, seed: int = 20240601):
    """Mean and covariance of ``(X, (X - tau)_+, W, (W - tau)_+)`` by Monte Carlo."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(draws)
    w = x + math.sqrt(sc.sigma_u2) * rng.standard_normal(draws)
    tau = sc.tau
    data = np.column_stack([x, np.maximum(x - tau, 0.0), w, np.maximum(w - tau, 0.0)])
    mean = data.mean(axis=0)
    cov = np.cov(data, rowvar=False)
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() < 0:
        warnings.warn("moment matrix not positive semi-definite; projected", RuntimeWarning,
                      stacklevel=2)
        cov = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
    return mean, cov


def generate_two_variable_cohort(sc: ScenarioSpec, lambda0: float, rng: np.random.Generator,
                                 moments) -> Cohort:
    """Cohort with ``w = W1``, ``z[:, 0] = W2`` and hazard driven by ``(X1, X2)``."""
    mean, cov = moments
    draws = rng.multivariate_normal(mean, cov, size=sc.n, method="eigh")
    x1, x2, w1, w2 = draws.T
    rate = lambda0 * np.exp(sc.beta0 * x1 + sc.omega0 * x2)
    t_event = rng.exponential(1.0, sc.n) / rate
    event = (t_event <= sc.t_star).astype(np.int8)
    exit_ = np.maximum(np.minimum(t_event, sc.t_star), np.finfo(float).tiny)
    cohort = Cohort.from_arrays(exit_, event, w1, w2, x=x1, t_star=sc.t_star)
    return cohort


def fit_two_variable(cohort: Cohort, method, moments, level: float = 0.95) -> FitResult:
    """Naive or regression-calibration fit of the two-variable design.

    Naive uses ``(W1, W2)``; RC replaces them with ``E[(X1, X2) | W1, W2]``
    from the known joint moments.
    """
    from threshold_cox.estimators import _fit_partial

    method = Method.parse(method)
    w = np.column_stack([cohort.w, cohort.z[:, 0]])
    if method is Method.NAIVE:
        design = w
    elif method in (Method.RC1, Method.RC2):
        mean, cov = moments
        slope = np.linalg.solve(cov[2:, 2:], cov[2:, :2])
        design = mean[:2] + (w - mean[2:]) @ slope
    else:
        raise ValueError(f"{method} is not available in the two-variable design")
    bare = Cohort.from_arrays(cohort.exit, cohort.event, cohort.w, entry=cohort.entry,
                              weight=cohort.weight, t_star=cohort.t_star)
    return _fit_partial(bare, ExponentialRelRisk(design), method, 0.0, None, level)


# --- replicate loop -------------------------------------------------------------

REPLICATE_COLUMNS = ["scenario", "rep", "method", "parameter", "truth", "estimate", "se",
                     "ci_lower", "ci_upper", "converged", "within_bound", "error"]
SUMMARY_COLUMNS = ["scenario", "method", "parameter", "truth", "n_reps", "n_used", "mean", "median",
                   "rel_bias_mean", "rel_bias_median", "emp_sd", "mean_se", "coverage",
                   "convergence_pct", "mc_se_mean"]
BOXPLOT_COLUMNS = ["scenario", "method", "parameter", "median", "box_lower", "box_upper"]


def replicate_rng(seed: int, rep: int) -> np.random.Generator:
    """Independent stream for one replicate, derived from the seed and the index."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(rep,)))


def _replicate(sc: ScenarioSpec, rep: int, lambda0: float, moments) -> list:
    rng = replicate_rng(sc.seed, rep)
    names = ThetaVector.names(len(sc.gamma0))
    truth = sc.truth
    methods = as_methods(sc.methods)
    fits: dict = {}
    if sc.setting == "two_variable":
        cohort = generate_two_variable_cohort(sc, lambda0, rng, moments)
        for m in methods:
            try:
                fits[m] = fit_two_variable(cohort, m, moments, sc.level)
            except ThresholdCoxError as exc:
                fits[m] = exc
    else:
        cohort = generate_cohort(sc, lambda0, rng)
        nuisance = None
        if sc.nuisance == "known":
            em = sc.known_error_model()
        else:
            study = generate_reliability_study(sc, rng)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                em = estimate_nuisance(study)
            nuisance = nuisance_score(study, em)
        sub = rng.integers(0, 2**63 - 1, size=2)
        fits = fit_methods(
            cohort, em, sc.tau, methods, nuisance=nuisance,
            bootstrap=BootstrapConfig(b=sc.bootstrap_b, seed=int(sub[0])),
            simex=SimexConfig(b=sc.simex_b, cov_bootstrap=sc.simex_cov_bootstrap, seed=int(sub[1])),
            level=sc.level, mpple_covariance=sc.mpple_covariance,
        )
    rows = []
    for m in methods:
        fit = fits.get(m)
        error = ""
        if isinstance(fit, Exception):
            error, fit = str(fit), None
        elif fit is not None:
            error = fit.details.get("error", "")
        if fit is None:
            est = se = np.full(len(truth), np.nan)
            ci = np.full((len(truth), 2), np.nan)
            conv = inb = False
        else:
            est, se, ci = fit.theta_hat.as_array(), fit.se, fit.ci
            conv, inb = fit.converged, within_bound(est)
        for j, name in enumerate(names):
            rows.append({
                "scenario": sc.label, "rep": rep, "method": str(m), "parameter": name,
                "truth": float(truth[j]), "estimate": float(est[j]), "se": float(se[j]),
                "ci_lower": float(ci[j, 0]), "ci_upper": float(ci[j, 1]),
                "converged": bool(conv), "within_bound": bool(inb), "error": error,
            })
    return rows


def _replicate_star(args):
    return _replicate(*args)


def worker_count() -> int:
    env = os.environ.get("THRESHOLD_COX_THREADS")
    cap = os.cpu_count() or 1
    if env:
        try:
            return max(1, min(int(env), cap))
        except ValueError:
            raise ThresholdCoxError("THRESHOLD_COX_THREADS must be an integer") from None
    return 1


@dataclass
class SummaryTable:
    rows: list = field(default_factory=list)

    def get(self, method, parameter: str) -> dict:
        for r in self.rows:
            if r["method"] == str(Method.parse(method)) and r["parameter"] == parameter:
                return r
        raise KeyError((method, parameter))


@dataclass
class ScenarioResult:
    spec: ScenarioSpec
    summary: SummaryTable
    replicates: list
    lambda0: float


def summarize(sc: ScenarioSpec, replicates: list) -> SummaryTable:
    """Aggregate replicate rows; metrics use only replicates that converged within the bound."""
    out = []
    names = ThetaVector.names(len(sc.gamma0))
    for m in sc.methods:
        for name in names:
            rows = [r for r in replicates if r["method"] == m and r["parameter"] == name]
            truth = rows[0]["truth"]
            used = [r for r in rows if r["converged"] and r["within_bound"]]
            est = np.array([r["estimate"] for r in used])
            se = np.array([r["se"] for r in used])
            k = len(used)
            row = {"scenario": sc.label, "method": m, "parameter": name, "truth": truth,
                   "n_reps": len(rows), "n_used": k, "convergence_pct": k / len(rows)}
            if k:
                mean = math.fsum(est) / k
                median = float(np.median(est))
                sd = math.sqrt(math.fsum((est - mean) ** 2) / (k - 1)) if k > 1 else float("nan")
                finite = np.isfinite(se)
                cover = [(r["ci_lower"] <= truth <= r["ci_upper"]) for r in used if np.isfinite(r["se"])]
                row.update(
                    mean=mean, median=median,
                    rel_bias_mean=(mean - truth) / truth if truth else float("nan"),
                    rel_bias_median=(median - truth) / truth if truth else float("nan"),
                    emp_sd=sd,
                    mean_se=math.fsum(se[finite]) / finite.sum() if finite.any() else float("nan"),
                    coverage=sum(cover) / len(cover) if cover else float("nan"),
                    mc_se_mean=sd / math.sqrt(k) if k > 1 else float("nan"),
                )
            else:
                row.update({c: float("nan") for c in SUMMARY_COLUMNS if c not in row})
            out.append(row)
    return SummaryTable(out)


def run_scenario(sc: ScenarioSpec, workers: int | None = None) -> ScenarioResult:
    """Run all replicates of a scenario and summarise them.

    Each replicate draws from its own stream derived from ``(seed, rep)``, so
    results do not depend on the number of workers.
    """
    moments = two_variable_moments(sc) if sc.setting == "two_variable" else None
    lambda0 = calibrate_lambda0(sc, moments)
    workers = worker_count() if workers is None else workers
    tasks = [(sc, rep, lambda0, moments) for rep in range(sc.reps)]
    if workers > 1 and sc.reps > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_replicate_star, tasks, chunksize=max(1, sc.reps // (4 * workers))))
    else:
        chunks = [_replicate_star(t) for t in tasks]
    replicates = [row for chunk in chunks for row in chunk]
    return ScenarioResult(sc, summarize(sc, replicates), replicates, lambda0)


def boxplot_rows(result: ScenarioResult) -> list:
    """Median and a box of half the interquartile range on either side."""
    out = []
    for row in result.summary.rows:
        ests = np.array([r["estimate"] for r in result.replicates
                         if r["method"] == row["method"] and r["parameter"] == row["parameter"]
                         and r["converged"] and r["within_bound"]])
        if len(ests):
            q1, med, q3 = np.percentile(ests, [25, 50, 75])
            half = 0.5 * (q3 - q1)
        else:
            med = half = float("nan")
        out.append({"scenario": row["scenario"], "method": row["method"],
                    "parameter": row["parameter"], "median": float(med),
                    "box_lower": float(med - half), "box_upper": float(med + half)})
    return out


def format_value(v) -> str:
    """Deterministic text for CSV cells."""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return "NA" if not np.isfinite(v) else repr(float(v))
    return str(v)


def rows_to_csv(rows: list, columns: list) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([format_value(r.get(c, "")) for c in columns])
    return buf.getvalue()


def spec_dict(sc: ScenarioSpec) -> dict:
    return asdict(sc)
