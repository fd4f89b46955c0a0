"""Core data model: subjects, cohorts, parameter vectors and fit results.

A cohort is stored in counting-process form. Every subject contributes one or
more rows ``(start, stop]`` on which the surrogate ``W`` and the error-free
covariates ``Z`` are constant. Time-fixed data give exactly one row per subject.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy.special import ndtri


class ThresholdCoxError(Exception):
    """Base class for errors raised by this package."""


class EstimationError(ThresholdCoxError):
    """An estimation routine could not produce a usable result."""


class DegenerateRiskSetError(EstimationError):
    """A risk set is empty or its relative-risk sum underflowed."""


class Method(str, enum.Enum):
    NAIVE = "Naive"
    RC1 = "RC1"
    RC2 = "RC2"
    RR1 = "RR1"
    RR2 = "RR2"
    MPPLE = "MPPLE"
    SIMEX = "SIMEX"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def parse(cls, name: str | Method) -> Method:
        if isinstance(name, cls):
            return name
        for m in cls:
            if m.value.lower() == str(name).strip().lower():
                return m
        raise ValueError(f"unknown method {name!r}")


# Estimation order used when several methods are fitted together; each method
# is started from the estimate of the one before it.
METHOD_HIERARCHY = (
    Method.NAIVE, Method.RC1, Method.RC2, Method.RR1, Method.RR2, Method.MPPLE, Method.SIMEX,
)

BOUND_CHECK = 4.9
BOX = (-5.0, 5.0)


def threshold_from_quantile(q: float) -> float:
    """Threshold placed at quantile ``q`` of a standard normal covariate."""
    if not 0.0 < q < 1.0:
        raise ValueError("quantile must lie in (0, 1)")
    return float(ndtri(q))


@dataclass(frozen=True)
class StepPath:
    """Left-continuous step function recorded at grid points.

    The value in force at time ``t`` is the one recorded at the largest grid
    point strictly below ``t``.
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 0:
            values = values[None]
        if len(times) == 0:
            raise ValueError("a path needs at least one grid point")
        if values.shape[0] != len(times):
            raise ValueError("times and values differ in length")
        if np.any(np.diff(times) <= 0):
            raise ValueError("path grid must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, value, time: float = 0.0) -> StepPath:
        return cls(np.array([time]), np.asarray(value, dtype=float)[None])

    def __call__(self, t: float):
        return step_lookup(self, t)


def step_lookup(path: StepPath, t: float):
    """Value of ``path`` in force at time ``t``.

    Raises:
        ThresholdCoxError: if no grid point lies strictly before ``t``.
    """
    idx = int(np.searchsorted(path.times, t, side="left")) - 1
    if idx < 0:
        raise ThresholdCoxError(f"no covariate history before t={t}")
    return path.values[idx]


@dataclass(frozen=True)
class Subject:
    id: object
    entry_time: float
    exit_time: float
    event: int
    w_path: StepPath
    z_path: StepPath | None = None
    stratum: object = 0
    x_path: StepPath | None = None
    weight: float = 1.0

    def __post_init__(self):
        if not self.exit_time > self.entry_time:
            raise ValueError(f"subject {self.id}: exit time must exceed entry time")
        if self.event not in (0, 1):
            raise ValueError(f"subject {self.id}: event must be 0 or 1")
        if not self.weight > 0:
            raise ValueError(f"subject {self.id}: weight must be positive")


def _as_2d(z, n: int) -> np.ndarray:
    if z is None:
        return np.zeros((n, 0))
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if z.shape[0] != n:
        raise ValueError("covariate array has the wrong number of rows")
    return z


@dataclass(frozen=True, eq=False)
class Cohort:
    """Array-backed cohort in counting-process layout.

    Subject-level arrays have length ``n``; row-level arrays have one entry per
    interval ``(start, stop]`` and ``row_subject`` maps rows to subjects. Rows
    of a subject are contiguous and ordered in time. ``w_measurement`` labels
    the distinct surrogate measurements so that simulation-based corrections
    perturb each measurement once, however many rows carry it.
    """

    ids: np.ndarray
    entry: np.ndarray
    exit: np.ndarray
    event: np.ndarray
    stratum: np.ndarray
    weight: np.ndarray
    row_subject: np.ndarray
    start: np.ndarray
    stop: np.ndarray
    w: np.ndarray
    z: np.ndarray
    w_measurement: np.ndarray
    x: np.ndarray | None = None
    t_star: float | None = None
    _shared: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.entry)
        if n == 0:
            raise ValueError("empty cohort")
        if np.any(self.exit <= self.entry):
            raise ValueError("exit time must exceed entry time")
        if np.any(self.weight <= 0) or not np.all(np.isfinite(self.weight)):
            raise ValueError("weights must be positive and finite")
        if not (np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.z))):
            raise ValueError("covariates must be finite")

    # construction -----------------------------------------------------------

    @classmethod
    def from_arrays(cls, exit, event, w, z=None, *, entry=None, stratum=None,
                    weight=None, x=None, ids=None, t_star=None) -> Cohort:
        """Cohort of time-fixed covariates, one row per subject."""
        exit = np.asarray(exit, dtype=float)
        n = len(exit)
        entry = np.zeros(n) if entry is None else np.asarray(entry, dtype=float)
        event = np.asarray(event).astype(np.int8)
        if not np.all((event == 0) | (event == 1)):
            raise ValueError("event must be 0 or 1")
        w = np.asarray(w, dtype=float)
        if w.shape != (n,):
            raise ValueError("w must have one value per subject")
        strata = np.zeros(n, dtype=np.int64) if stratum is None else np.asarray(stratum)
        idx = np.arange(n)
        return cls(
            ids=idx if ids is None else np.asarray(ids),
            entry=entry, exit=exit, event=event,
            stratum=strata,
            weight=np.ones(n) if weight is None else np.asarray(weight, dtype=float),
            row_subject=idx, start=entry, stop=exit,
            w=w, z=_as_2d(z, n), w_measurement=idx,
            x=None if x is None else np.asarray(x, dtype=float),
            t_star=t_star,
        )

    @classmethod
    def from_subjects(cls, subjects: Sequence[Subject], t_star: float | None = None) -> Cohort:
        """Split subjects at every grid point of their covariate paths."""
        subjects = list(subjects)
        if not subjects:
            raise ValueError("empty cohort")
        p = None
        has_x = subjects[0].x_path is not None
        rows_subj, starts, stops, ws, zs, xs, meas = [], [], [], [], [], [], []
        meas_offset = 0
        for i, s in enumerate(subjects):
            paths = [s.w_path] + ([s.z_path] if s.z_path is not None else [])
            if has_x != (s.x_path is not None):
                raise ValueError("x_path must be given for all subjects or none")
            if has_x:
                paths.append(s.x_path)
            for path in paths:
                if path.times[0] > s.entry_time:
                    raise ThresholdCoxError(f"subject {s.id}: no covariate history at entry")
            grid = np.unique(np.concatenate([pth.times for pth in paths]))
            cuts = grid[(grid > s.entry_time) & (grid < s.exit_time)]
            lo = np.concatenate([[s.entry_time], cuts])
            hi = np.concatenate([cuts, [s.exit_time]])
            w_idx = np.searchsorted(s.w_path.times, lo, side="right") - 1
            ws.append(s.w_path.values[w_idx].reshape(len(lo)))
            meas.append(meas_offset + w_idx)
            meas_offset += len(s.w_path.times)
            if s.z_path is not None:
                zv = s.z_path.values
                zv = zv.reshape(len(s.z_path.times), -1)
                zi = np.searchsorted(s.z_path.times, lo, side="right") - 1
                zs.append(zv[zi])
                pz = zv.shape[1]
            else:
                pz = 0
                zs.append(np.zeros((len(lo), 0)))
            if p is None:
                p = pz
            elif p != pz:
                raise ValueError("all subjects need the same number of covariates")
            if has_x:
                xi = np.searchsorted(s.x_path.times, lo, side="right") - 1
                xs.append(s.x_path.values[xi].reshape(len(lo)))
            rows_subj.append(np.full(len(lo), i))
            starts.append(lo)
            stops.append(hi)
        w_meas = np.concatenate(meas)
        _, w_meas = np.unique(w_meas, return_inverse=True)
        return cls(
            ids=np.array([s.id for s in subjects], dtype=object),
            entry=np.array([s.entry_time for s in subjects], dtype=float),
            exit=np.array([s.exit_time for s in subjects], dtype=float),
            event=np.array([s.event for s in subjects], dtype=np.int8),
            stratum=np.array([s.stratum for s in subjects]),
            weight=np.array([s.weight for s in subjects], dtype=float),
            row_subject=np.concatenate(rows_subj),
            start=np.concatenate(starts), stop=np.concatenate(stops),
            w=np.concatenate(ws), z=np.concatenate(zs, axis=0),
            w_measurement=w_meas.astype(np.int64),
            x=np.concatenate(xs) if has_x else None,
            t_star=t_star,
        )

    # derived views ----------------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.entry)

    @property
    def p(self) -> int:
        return self.z.shape[1]

    @property
    def n_rows(self) -> int:
        return len(self.start)

    @property
    def n_events(self) -> int:
        return int(self.event.sum())

    @property
    def time_fixed(self) -> bool:
        return self.n_rows == self.n

    @cached_property
    def row_event(self) -> np.ndarray:
        """Event indicator per row: the subject's event, on its last row."""
        last = np.r_[self.row_subject[1:] != self.row_subject[:-1], True]
        return (self.event[self.row_subject] == 1) & last

    @property
    def row_weight(self) -> np.ndarray:
        return self.weight[self.row_subject]

    @cached_property
    def first_row(self) -> np.ndarray:
        """Index of each subject's first row, i.e. its baseline covariates."""
        first = np.r_[True, self.row_subject[1:] != self.row_subject[:-1]]
        return np.flatnonzero(first)

    @cached_property
    def strata_codes(self) -> tuple[np.ndarray, np.ndarray]:
        """Distinct stratum labels and an integer code per subject."""
        labels, codes = np.unique(self.stratum, return_inverse=True)
        return labels, codes

    @property
    def subjects(self) -> list[Subject]:
        out = []
        for i in range(self.n):
            rows = np.flatnonzero(self.row_subject == i)
            times = self.start[rows]
            out.append(Subject(
                id=self.ids[i], entry_time=float(self.entry[i]), exit_time=float(self.exit[i]),
                event=int(self.event[i]), stratum=self.stratum[i], weight=float(self.weight[i]),
                w_path=StepPath(times, self.w[rows]),
                z_path=StepPath(times, self.z[rows]) if self.p else None,
                x_path=None if self.x is None else StepPath(times, self.x[rows]),
            ))
        return out

    def shared_cache(self, key, builder):
        """Cache for structures that depend only on times and strata.

        Reweighted copies and copies with perturbed surrogates share it.
        """
        if key not in self._shared:
            self._shared[key] = builder()
        return self._shared[key]

    def reweighted(self, weights) -> Cohort:
        """Same cohort with subject weights multiplied by ``weights``."""
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (self.n,):
            raise ValueError("one weight per subject is required")
        return replace(self, weight=self.weight * weights, _shared=self._shared)

    def with_w(self, w_rows) -> Cohort:
        """Same cohort with the surrogate replaced row by row."""
        w_rows = np.asarray(w_rows, dtype=float)
        if w_rows.shape != self.w.shape:
            raise ValueError("replacement surrogate has the wrong shape")
        return replace(self, w=w_rows, _shared=self._shared)

    def subset(self, mask) -> Cohort:
        """Cohort restricted to the subjects selected by a boolean mask."""
        mask = np.asarray(mask, dtype=bool)
        keep_rows = mask[self.row_subject]
        new_index = np.cumsum(mask) - 1
        _, meas = np.unique(self.w_measurement[keep_rows], return_inverse=True)
        return Cohort(
            ids=self.ids[mask], entry=self.entry[mask], exit=self.exit[mask],
            event=self.event[mask], stratum=self.stratum[mask], weight=self.weight[mask],
            row_subject=new_index[self.row_subject[keep_rows]],
            start=self.start[keep_rows], stop=self.stop[keep_rows],
            w=self.w[keep_rows], z=self.z[keep_rows], w_measurement=meas.astype(np.int64),
            x=None if self.x is None else self.x[keep_rows], t_star=self.t_star,
        )


@dataclass(frozen=True)
class ThetaVector:
    """Regression parameters ``(gamma, beta, omega)`` and the fixed threshold."""

    gamma: tuple = ()
    beta: float = 0.0
    omega: float = 0.0
    tau: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "gamma", tuple(float(g) for g in np.atleast_1d(self.gamma)))
        if not np.isfinite(self.tau):
            raise ValueError("threshold must be finite")

    @property
    def p(self) -> int:
        return len(self.gamma)

    def as_array(self) -> np.ndarray:
        return np.array([*self.gamma, self.beta, self.omega], dtype=float)

    @classmethod
    def from_array(cls, arr, tau: float) -> ThetaVector:
        arr = np.asarray(arr, dtype=float)
        return cls(gamma=tuple(arr[:-2]), beta=float(arr[-2]), omega=float(arr[-1]), tau=tau)

    @staticmethod
    def names(p: int) -> list[str]:
        return [f"gamma{j + 1}" for j in range(p)] + ["beta", "omega"]


def relative_risk(theta: ThetaVector, x, z=None) -> np.ndarray:
    """``exp(gamma'z + beta x + omega (x - tau)_+)`` for arrays of subjects."""
    x = np.asarray(x, dtype=float)
    eta = theta.beta * x + theta.omega * np.maximum(x - theta.tau, 0.0)
    if theta.p:
        z = _as_2d(z, len(np.atleast_1d(x)))
        eta = eta + z @ np.asarray(theta.gamma)
    return np.exp(eta)


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function starting at zero, e.g. a cumulative hazard."""

    times: np.ndarray
    values: np.ndarray

    def __call__(self, t):
        idx = np.searchsorted(self.times, t, side="right") - 1
        vals = np.where(idx >= 0, self.values[np.maximum(idx, 0)], 0.0)
        return vals if np.ndim(t) else float(vals)

    def left_limit(self, t):
        """Value just before ``t``."""
        idx = np.searchsorted(self.times, t, side="left") - 1
        vals = np.where(idx >= 0, self.values[np.maximum(idx, 0)], 0.0)
        return vals if np.ndim(t) else float(vals)


@dataclass(frozen=True)
class Baseline:
    """Cumulative baseline hazard, one step function per stratum."""

    strata: dict

    def __call__(self, t, stratum=None):
        return self._pick(stratum)(t)

    def left_limit(self, t, stratum=None):
        return self._pick(stratum).left_limit(t)

    def _pick(self, stratum):
        if stratum is None:
            if len(self.strata) != 1:
                raise ValueError("stratum required for a stratified baseline")
            return next(iter(self.strata.values()))
        return self.strata[stratum]


@dataclass
class FitResult:
    """Outcome of one estimation method on one cohort.

    ``covariance`` estimates the covariance of ``theta_hat`` itself (not of a
    root-n scaled version) and ``ci`` holds Wald intervals at ``level``.
    """

    method: Method
    theta_hat: ThetaVector
    covariance: np.ndarray | None = None
    converged: bool = False
    within_bound: bool = False
    iterations: int = 0
    baseline: Baseline | None = None
    level: float = 0.95
    details: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        q = len(self.theta_hat.as_array())
        if self.covariance is None:
            return np.full(q, np.nan)
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def ci(self) -> np.ndarray:
        from threshold_cox.variance import wald_ci

        return wald_ci(self.theta_hat.as_array(), self.covariance, self.level)

    @property
    def ok(self) -> bool:
        return self.converged and self.within_bound


def within_bound(theta: np.ndarray, bound: float = BOUND_CHECK) -> bool:
    return bool(np.all(np.isfinite(theta)) and np.all(np.abs(theta) <= bound))


def as_methods(methods: Iterable) -> list[Method]:
    """Distinct methods in the order of the estimation hierarchy."""
    wanted = {Method.parse(m) for m in methods}
    return [m for m in METHOD_HIERARCHY if m in wanted]
