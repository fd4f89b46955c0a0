"""Command-line interface: ``threshold-cox {fit,simulate,bias-limit,concordance}``.

Every command reads a JSON run configuration (``--config``) whose fields can
be overridden by flags. Outputs are CSV files written atomically; identical
configurations produce identical bytes.

Exit codes: 0 success (non-converged fits are flagged in the output), 2
configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import tempfile
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from threshold_cox.domain import (
    Cohort, EstimationError, Method, StepPath, Subject, ThresholdCoxError, as_methods,
)
from threshold_cox.errormodel import ErrorModelParams, estimate_nuisance, read_reliability_csv

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
NUISANCE_SOURCES = ("reliability_csv", "explicit", "conditional")
FIT_COLUMNS = ["method", "parameter", "estimate", "se", "p_value", "ci_lower", "ci_upper",
               "converged", "within_bound", "note"]
LIMIT_COLUMNS = ["method", "rho_xw", "tau_quantile", "cum_incidence", "beta_bar", "omega_bar",
                 "bias_beta", "bias_omega", "converged", "note"]
CONCORDANCE_COLUMNS = ["method", "c_index", "definition", "note"]


class ConfigError(ThresholdCoxError):
    """Invalid configuration or input file."""


@dataclass
class RunConfig:
    """Settings of one CLI run; field names are the JSON keys."""

    command: str = "fit"
    subjects: str | None = None
    paths: str | None = None
    reliability: str | None = None
    output: str | None = None
    scenarios: str | list | None = None
    methods: list = field(default_factory=lambda: ["Naive"])
    tau: float | None = None
    level: float = 0.95
    seed: int = 0
    bootstrap_b: int = 100
    simex_grid: list = field(default_factory=lambda: [0.5, 1.0, 1.5, 2.0])
    simex_b: int = 100
    simex_cov_bootstrap: int = 50
    mpple_covariance: str = "ij"
    nuisance: dict | None = None
    c_index: bool = False
    rho_grid: list = field(default_factory=lambda: [0.8])
    tau_quantiles: list = field(default_factory=lambda: [0.5])
    cum_incidence: float = 0.01
    t_star: float = 10.0
    mc_size: int = 200_000
    workers: int | None = None

    @classmethod
    def from_json(cls, path) -> RunConfig:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: the configuration must be a JSON object")
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"{path}: unknown configuration fields {unknown}")
        return cls(**data)

    def validate(self) -> None:
        try:
            methods = as_methods(self.methods)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not 0 < self.level < 1:
            raise ConfigError("level must lie in (0, 1)")
        if self.command in ("fit", "concordance"):
            if self.subjects is None:
                raise ConfigError("a subjects file is required")
            if self.tau is None or not math.isfinite(self.tau):
                raise ConfigError("the threshold tau is required")
            corrections = set(methods) - {Method.NAIVE}
            if corrections:
                if not self.nuisance:
                    raise ConfigError("correction methods need exactly one nuisance source")
                source = self.nuisance.get("source")
                if source not in NUISANCE_SOURCES:
                    raise ConfigError(f"nuisance source must be one of {NUISANCE_SOURCES}")
                if source == "reliability_csv" and not self.reliability:
                    raise ConfigError("nuisance source reliability_csv needs a reliability file")
                if source == "reliability_csv" and not Path(self.reliability).is_file():
                    raise ConfigError(f"reliability file {self.reliability} not found")
            if self.mpple_covariance not in ("ij", "model", "bootstrap"):
                raise ConfigError("mpple_covariance must be ij, model or bootstrap")
        if self.command == "simulate" and self.scenarios is None:
            raise ConfigError("simulate needs scenarios")
        if self.output is None:
            raise ConfigError("an output path is required")


# --- input files -------------------------------------------------------------------


def _float(value, where: str, name: str) -> float:
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: {name} is not a number ({value!r})") from None
    if not math.isfinite(out):
        raise ConfigError(f"{where}: {name} must be finite")
    return out


def _open_csv(path):
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    reader = csv.DictReader(fh)
    if not reader.fieldnames:
        fh.close()
        raise ConfigError(f"{path}:1: header row required")
    return fh, reader


def _z_columns(header, path) -> list:
    zs = [c for c in header if c.startswith("z") and c[1:].isdigit()]
    expected = [f"z{j}" for j in range(1, len(zs) + 1)]
    if sorted(zs, key=lambda c: int(c[1:])) != expected:
        raise ConfigError(f"{path}:1: covariate columns must be z1..zp")
    return expected


def read_subjects(path, paths_file=None) -> Cohort:
    """Read ``id, entry_time, exit_time, event, stratum, w, z1..zp`` (plus optional ``weight``).

    With ``paths_file`` (``id, time, w, z1..zp``) the covariates are
    time-varying step paths and the ``w``/``z`` columns of the subjects file
    are ignored.
    """
    fh, reader = _open_csv(path)
    with fh:
        header = reader.fieldnames
        need = ["id", "entry_time", "exit_time", "event", "stratum"] + ([] if paths_file else ["w"])
        missing = [c for c in need if c not in header]
        if missing:
            raise ConfigError(f"{path}:1: missing columns {missing}")
        zcols = [] if paths_file else _z_columns(header, path)
        recs = []
        seen = set()
        for line, rec in enumerate(reader, start=2):
            where = f"{path}:{line}"
            sid = rec["id"]
            if sid in seen:
                raise ConfigError(f"{where}: duplicate id {sid!r}")
            seen.add(sid)
            entry = _float(rec["entry_time"], where, "entry_time")
            exit_ = _float(rec["exit_time"], where, "exit_time")
            if not exit_ > entry:
                raise ConfigError(f"{where}: exit_time must exceed entry_time")
            if entry < 0:
                raise ConfigError(f"{where}: entry_time must be non-negative")
            if rec["event"] not in ("0", "1"):
                raise ConfigError(f"{where}: event must be 0 or 1")
            weight = _float(rec["weight"], where, "weight") if rec.get("weight") not in (None, "") else 1.0
            if not weight > 0:
                raise ConfigError(f"{where}: weight must be positive")
            w = None if paths_file else _float(rec["w"], where, "w")
            z = [] if paths_file else [_float(rec[c], where, c) for c in zcols]
            recs.append((sid, entry, exit_, int(rec["event"]), rec["stratum"], w, z, weight))
    if not recs:
        raise ConfigError(f"{path}: no data rows")
    strata = [r[4] for r in recs]
    stratum = np.array([_maybe_number(s) for s in strata], dtype=object)
    if all(isinstance(s, (int, float)) for s in stratum):
        stratum = stratum.astype(float)
    else:
        stratum = stratum.astype(str)
    if paths_file is None:
        return Cohort.from_arrays(
            exit=[r[2] for r in recs], event=[r[3] for r in recs], w=[r[5] for r in recs],
            z=np.array([r[6] for r in recs], dtype=float).reshape(len(recs), -1),
            entry=[r[1] for r in recs], stratum=stratum, weight=[r[7] for r in recs],
            ids=np.array([r[0] for r in recs]),
        )
    paths = _read_paths(paths_file)
    subjects = []
    for (sid, entry, exit_, event, _, _, _, weight), st in zip(recs, stratum):
        if sid not in paths:
            raise ConfigError(f"{paths_file}: no covariate path for subject {sid!r}")
        times, ws, zs = paths.pop(sid)
        try:
            subjects.append(Subject(
                id=sid, entry_time=entry, exit_time=exit_, event=event, stratum=st, weight=weight,
                w_path=StepPath(times, ws), z_path=StepPath(times, zs) if zs.shape[1] else None))
        except ValueError as exc:
            raise ConfigError(f"{paths_file}: subject {sid!r}: {exc}") from None
    if paths:
        raise ConfigError(f"{paths_file}: paths for unknown subjects {sorted(paths)[:5]}")
    try:
        return Cohort.from_subjects(subjects)
    except ThresholdCoxError as exc:
        raise ConfigError(str(exc)) from None


def _maybe_number(s: str):
    try:
        return int(s)
    except ValueError:
        try:
            return float(s)
        except ValueError:
            return s


def _read_paths(path) -> dict:
    fh, reader = _open_csv(path)
    with fh:
        header = reader.fieldnames
        missing = [c for c in ("id", "time", "w") if c not in header]
        if missing:
            raise ConfigError(f"{path}:1: missing columns {missing}")
        zcols = _z_columns(header, path)
        out: dict = {}
        for line, rec in enumerate(reader, start=2):
            where = f"{path}:{line}"
            t = _float(rec["time"], where, "time")
            w = _float(rec["w"], where, "w")
            z = [_float(rec[c], where, c) for c in zcols]
            out.setdefault(rec["id"], []).append((t, w, z))
    result = {}
    for sid, pts in out.items():
        pts.sort(key=lambda p: p[0])
        times = np.array([p[0] for p in pts])
        if np.any(np.diff(times) <= 0):
            raise ConfigError(f"{path}: subject {sid!r} has repeated path times")
        result[sid] = (times, np.array([p[1] for p in pts]),
                       np.array([p[2] for p in pts], dtype=float).reshape(len(pts), len(zcols)))
    return result


def nuisance_from_config(cfg: RunConfig):
    """``(ErrorModelParams, NuisanceScore or None)`` for the configured source."""
    from threshold_cox.variance import nuisance_score

    spec = cfg.nuisance or {}
    source = spec.get("source")
    try:
        if source == "reliability_csv":
            study = read_reliability_csv(cfg.reliability)
            em = estimate_nuisance(study)
            return em, nuisance_score(study, em)
        if source == "explicit":
            return ErrorModelParams(alpha0=float(spec.get("alpha0", 0.0)),
                                    alpha1=tuple(spec.get("alpha1", ())),
                                    sigma_x2=float(spec["sigma_x2"]),
                                    sigma_u2=float(spec["sigma_u2"])), None
        if source == "conditional":
            return ErrorModelParams.from_conditional(float(spec["intercept"]), float(spec["slope"]),
                                                     float(spec["variance"])), None
    except KeyError as exc:
        raise ConfigError(f"nuisance source {source}: missing field {exc.args[0]!r}") from None
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"nuisance source {source}: {exc}") from None
    except ThresholdCoxError as exc:
        raise ConfigError(str(exc)) from None
    return None, None


# --- output ------------------------------------------------------------------------


def write_atomic(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- commands ----------------------------------------------------------------------


def _fit_all(cfg: RunConfig, cohort: Cohort):
    from threshold_cox.estimators import BootstrapConfig, SimexConfig, fit_methods, rare_disease_warning

    methods = as_methods(cfg.methods)
    if Method.MPPLE in methods and not cohort.time_fixed:
        raise ConfigError("MPPLE requires time-independent covariates")
    em, ns = nuisance_from_config(cfg) if set(methods) - {Method.NAIVE} else (None, None)
    rare_disease_warning(cohort, methods)
    fits = fit_methods(
        cohort, em, cfg.tau, methods, nuisance=ns,
        bootstrap=BootstrapConfig(b=cfg.bootstrap_b, seed=cfg.seed),
        simex=SimexConfig(lambda_grid=tuple(cfg.simex_grid), b=cfg.simex_b,
                          cov_bootstrap=cfg.simex_cov_bootstrap, seed=cfg.seed),
        level=cfg.level, mpple_covariance=cfg.mpple_covariance)
    return em, fits


def cmd_fit(cfg: RunConfig) -> int:
    from threshold_cox.concordance import MarkerSpec, c_index
    from threshold_cox.domain import ThetaVector
    from threshold_cox.simulate import rows_to_csv
    from threshold_cox.variance import wald_pvalues

    cohort = read_subjects(cfg.subjects, cfg.paths)
    em, fits = _fit_all(cfg, cohort)
    names = ThetaVector.names(cohort.p)
    rows = []
    columns = FIT_COLUMNS + (["c_index"] if cfg.c_index else [])
    for method, fit in fits.items():
        est, se, ci = fit.theta_hat.as_array(), fit.se, fit.ci
        pv = wald_pvalues(est, se)
        note = fit.details.get("error") or fit.details.get("covariance_error", "")
        if not note and not fit.converged:
            note = "not converged"
        cidx = float("nan")
        if cfg.c_index and fit.ok:
            try:
                cidx = c_index(cohort, MarkerSpec.for_method(method, fit.theta_hat, em, fit.baseline))
            except ThresholdCoxError as exc:
                note = note or str(exc)
        for j, name in enumerate(names):
            rows.append({"method": str(method), "parameter": name, "estimate": est[j], "se": se[j],
                         "p_value": pv[j], "ci_lower": ci[j, 0], "ci_upper": ci[j, 1],
                         "converged": fit.converged, "within_bound": fit.within_bound,
                         "note": note, "c_index": cidx})
    write_atomic(cfg.output, rows_to_csv(rows, columns))
    return EXIT_OK


def cmd_concordance(cfg: RunConfig) -> int:
    from threshold_cox.concordance import MarkerSpec, c_index
    from threshold_cox.simulate import rows_to_csv

    cohort = read_subjects(cfg.subjects, cfg.paths)
    em, fits = _fit_all(cfg, cohort)
    rows = []
    for method, fit in fits.items():
        note, value = "", float("nan")
        if fit.ok:
            try:
                value = c_index(cohort, MarkerSpec.for_method(method, fit.theta_hat, em, fit.baseline))
            except ThresholdCoxError as exc:
                note = str(exc)
        else:
            note = fit.details.get("error", "not converged")
        rows.append({"method": str(method), "c_index": value, "definition": "Harrell", "note": note})
    write_atomic(cfg.output, rows_to_csv(rows, CONCORDANCE_COLUMNS))
    return EXIT_OK


def _load_scenarios(cfg: RunConfig) -> list:
    from threshold_cox.simulate import ScenarioSpec

    raw = cfg.scenarios
    if isinstance(raw, str):
        try:
            with open(raw, encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"{cfg.scenarios}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{cfg.scenarios}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if isinstance(raw, dict):
        raw = [raw]
    if not isinstance(raw, list) or not raw:
        raise ConfigError("scenarios must be a non-empty list of objects")
    out = []
    for k, item in enumerate(raw):
        if not isinstance(item, dict):
            raise ConfigError(f"scenario {k}: must be an object")
        item = {"seed": cfg.seed, **item}
        try:
            out.append(ScenarioSpec.from_dict(item))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"scenario {k}: {exc}") from None
    labels = [s.label for s in out]
    if len(set(labels)) != len(labels):
        raise ConfigError("scenario labels must be distinct; set name")
    return out


def cmd_simulate(cfg: RunConfig) -> int:
    from threshold_cox.simulate import (
        BOXPLOT_COLUMNS, REPLICATE_COLUMNS, SUMMARY_COLUMNS, boxplot_rows, rows_to_csv, run_scenario,
    )

    scenarios = _load_scenarios(cfg)
    summary, reps, boxes = [], [], []
    for sc in scenarios:
        res = run_scenario(sc, workers=cfg.workers)
        summary += res.summary.rows
        reps += res.replicates
        boxes += boxplot_rows(res)
    out = Path(cfg.output)
    write_atomic(out / "summary.csv", rows_to_csv(summary, SUMMARY_COLUMNS))
    write_atomic(out / "replicates.csv", rows_to_csv(reps, REPLICATE_COLUMNS))
    write_atomic(out / "boxplot_data.csv", rows_to_csv(boxes, BOXPLOT_COLUMNS))
    return EXIT_OK


def cmd_bias_limit(cfg: RunConfig) -> int:
    from threshold_cox.asymptotics import LIMIT_METHODS, LimitScenario, limiting_theta
    from threshold_cox.simulate import rows_to_csv

    methods = as_methods(cfg.methods)
    bad = [str(m) for m in methods if m not in LIMIT_METHODS]
    if bad:
        raise ConfigError(f"limiting values are not available for {bad}")
    rows = []
    for rho in cfg.rho_grid:
        for qt in cfg.tau_quantiles:
            if not 0 < qt < 1:
                raise ConfigError("tau quantiles must lie in (0, 1)")
            try:
                sc = LimitScenario(tau=float(ndtri(qt)), rho_xw=float(rho),
                                   cum_incidence=cfg.cum_incidence, t_star=cfg.t_star,
                                   mc_size=cfg.mc_size)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
            for m in methods:
                row = {"method": str(m), "rho_xw": float(rho), "tau_quantile": float(qt),
                       "cum_incidence": cfg.cum_incidence}
                try:
                    th = limiting_theta(m, sc, seed=cfg.seed).as_array()
                    row.update(beta_bar=th[0], omega_bar=th[1], bias_beta=th[0] - sc.beta0,
                               bias_omega=th[1] - sc.omega0, converged=True, note="")
                except EstimationError as exc:
                    nan = float("nan")
                    row.update(beta_bar=nan, omega_bar=nan, bias_beta=nan, bias_omega=nan,
                               converged=False, note=str(exc).splitlines()[0])
                rows.append(row)
    write_atomic(cfg.output, rows_to_csv(rows, LIMIT_COLUMNS))
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "bias-limit": cmd_bias_limit,
            "concordance": cmd_concordance}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="threshold-cox",
        description="Cox regression with a known threshold in a mismeasured covariate.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--output", "-o")
        p.add_argument("--seed", type=int)
        p.add_argument("--methods", help="comma-separated method names")
        p.add_argument("--level", type=float)
        if name in ("fit", "concordance"):
            p.add_argument("--subjects")
            p.add_argument("--paths")
            p.add_argument("--reliability")
            p.add_argument("--tau", type=float)
            p.add_argument("--bootstrap-b", type=int, dest="bootstrap_b")
            p.add_argument("--mpple-covariance", dest="mpple_covariance")
            p.add_argument("--sigma-u2", type=float, dest="sigma_u2",
                           help="explicit error variance (with --sigma-x2 and --alpha0)")
            p.add_argument("--sigma-x2", type=float, dest="sigma_x2")
            p.add_argument("--alpha0", type=float)
        if name == "fit":
            p.add_argument("--c-index", action="store_true", dest="c_index", default=None)
        if name == "simulate":
            p.add_argument("--scenarios")
            p.add_argument("--workers", type=int)
        if name == "bias-limit":
            p.add_argument("--rho", help="comma-separated reliability correlations", dest="rho_grid")
            p.add_argument("--tau-quantiles", dest="tau_quantiles")
            p.add_argument("--cum-incidence", type=float, dest="cum_incidence")
            p.add_argument("--mc-size", type=int, dest="mc_size")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    cfg.command = args.command
    given = {k: v for k, v in vars(args).items() if v is not None and k not in ("config", "command")}
    if "methods" in given:
        given["methods"] = [m.strip() for m in given["methods"].split(",") if m.strip()]
    for key in ("rho_grid", "tau_quantiles"):
        if key in given:
            try:
                given[key] = [float(v) for v in given[key].split(",")]
            except ValueError:
                raise ConfigError(f"--{key}: expected comma-separated numbers") from None
    explicit = {k: given.pop(k) for k in ("sigma_u2", "sigma_x2", "alpha0") if k in given}
    if explicit:
        if "sigma_u2" not in explicit:
            raise ConfigError("--sigma-u2 is required for an explicit error model")
        cfg.nuisance = {"source": "explicit", "sigma_x2": explicit.get("sigma_x2", 1.0),
                        "sigma_u2": explicit["sigma_u2"], "alpha0": explicit.get("alpha0", 0.0)}
    if "reliability" in given and not explicit and cfg.nuisance is None:
        cfg.nuisance = {"source": "reliability_csv"}
    for key, value in given.items():
        setattr(cfg, key, value)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    warnings.simplefilter("default")
    try:
        cfg = config_from_args(args)
        cfg.validate()
        return COMMANDS[cfg.command](cfg)
    except ConfigError as exc:
        print(f"threshold-cox: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EstimationError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"threshold-cox: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ThresholdCoxError as exc:
        print(f"threshold-cox: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
