"""Partial likelihood machinery shared by every estimator.

Risk sets follow the counting-process convention: row ``(start, stop]`` is at
risk at time ``t`` when ``start < t <= stop``, which handles delayed entry and
time-varying covariates alike. Tied event times use the Breslow convention.
Strata have separate risk sets and separate baseline hazards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from threshold_cox.domain import (
    BOX, Baseline, Cohort, DegenerateRiskSetError, EstimationError, StepFunction,
)
from threshold_cox.errormodel import ErrorModelParams, cond_mean_x, induced_log_rr, surrogate_pair


class RelRisk:
    """Row-level log relative risk ``log r(theta)`` and its derivatives.

    Subclasses implement :meth:`log_terms`, returning ``log r`` of shape
    ``(R,)``, the gradient ``(R, q)`` and the Hessian ``(R, q, q)`` in
    ``theta``. A ``None`` Hessian means it vanishes identically, which is the
    case for the exponential form ``exp(theta'v)``.
    """

    q: int

    def log_terms(self, theta: np.ndarray, order: int = 2):
        raise NotImplementedError


class ExponentialRelRisk(RelRisk):
    """``r = exp(theta'v)`` for a fixed row design ``v``."""

    def __init__(self, design: np.ndarray):
        self.design = np.ascontiguousarray(design, dtype=float)
        self.q = self.design.shape[1]

    def log_terms(self, theta, order=2):
        logr = self.design @ theta
        grad = self.design if order >= 1 else None
        return logr, grad, None


class InducedRelRisk(RelRisk):
    """``exp(gamma'z) E[exp(beta X + omega (X - tau)_+) | W, Z]`` under the normal error model."""

    def __init__(self, cohort: Cohort, em: ErrorModelParams, tau: float):
        self.z = cohort.z
        self.p = cohort.p
        self.q = self.p + 2
        self.mu = cond_mean_x(cohort.w, cohort.z, em)
        self.eta = em.eta
        self.tau = tau

    def log_terms(self, theta, order=2):
        gamma, beta, omega = theta[:self.p], theta[-2], theta[-1]
        lin = self.z @ gamma
        res = induced_log_rr(beta, omega, self.tau, self.mu, self.eta, order=order)
        if order == 0:
            return lin + res, None, None
        grad = np.empty((len(self.mu), self.q))
        grad[:, :self.p] = self.z
        grad[:, self.p:] = res[1]
        hess = None
        if order >= 2:
            hess = np.zeros((len(self.mu), self.q, self.q))
            hess[:, self.p:, self.p:] = res[2]
        return lin + res[0], grad, hess


def plugin_relrisk(cohort: Cohort, method, em: ErrorModelParams | None, tau: float) -> ExponentialRelRisk:
    """Exponential relative risk on ``(Z, g1, g2)`` for Naive, RC1 and RC2."""
    pair = surrogate_pair(method, cohort.w, cohort.z, em, tau)
    return ExponentialRelRisk(np.column_stack([cohort.z, pair]))


@dataclass(frozen=True)
class _StratumIndex:
    rows: np.ndarray          # rows of the stratum
    by_stop: np.ndarray       # rows sorted by stop time
    by_start: np.ndarray      # rows sorted by start time
    times: np.ndarray         # distinct event times
    pos_stop: np.ndarray      # first position in by_stop with stop >= t_k
    pos_start: np.ndarray     # first position in by_start with start >= t_k
    k_stop: np.ndarray        # per row of the stratum: number of event times <= stop
    k_start: np.ndarray       # per row of the stratum: number of event times <= start


@dataclass(frozen=True)
class RiskSetIndex:
    """Weight-free bookkeeping of risk sets, shared by reweighted cohorts."""

    strata: list
    labels: np.ndarray
    event_rows: np.ndarray    # rows carrying an event
    event_k: np.ndarray       # global event-time index of each event row
    offsets: np.ndarray       # start of each stratum's block of event times
    n_times: int


def risk_set_index(cohort: Cohort) -> RiskSetIndex:
    return cohort.shared_cache("risk_set_index", lambda: _build_index(cohort))


def _build_index(cohort: Cohort) -> RiskSetIndex:
    labels, codes = cohort.strata_codes
    row_code = codes[cohort.row_subject]
    ev = cohort.row_event
    strata = []
    event_rows, event_k = [], []
    offsets = [0]
    for s in range(len(labels)):
        rows = np.flatnonzero(row_code == s)
        stop, start = cohort.stop[rows], cohort.start[rows]
        ev_rows = rows[ev[rows]]
        times = np.unique(cohort.stop[ev_rows])
        by_stop = rows[np.argsort(stop, kind="stable")]
        by_start = rows[np.argsort(start, kind="stable")]
        strata.append(_StratumIndex(
            rows=rows, by_stop=by_stop, by_start=by_start, times=times,
            pos_stop=np.searchsorted(cohort.stop[by_stop], times, side="left"),
            pos_start=np.searchsorted(cohort.start[by_start], times, side="left"),
            k_stop=np.searchsorted(times, stop, side="right"),
            k_start=np.searchsorted(times, start, side="right"),
        ))
        event_rows.append(ev_rows)
        event_k.append(offsets[-1] + np.searchsorted(times, cohort.stop[ev_rows]))
        offsets.append(offsets[-1] + len(times))
    return RiskSetIndex(
        strata=strata, labels=labels,
        event_rows=np.concatenate(event_rows), event_k=np.concatenate(event_k),
        offsets=np.array(offsets), n_times=offsets[-1],
    )


def _suffix(vals: np.ndarray) -> np.ndarray:
    out = np.zeros((len(vals) + 1,) + vals.shape[1:])
    out[:-1] = np.cumsum(vals[::-1], axis=0)[::-1]
    return out


def _risk_sums(sx: _StratumIndex, vals: np.ndarray) -> np.ndarray:
    """Sum of row values over the risk set at every event time of a stratum."""
    at = _suffix(vals[sx.by_stop])[sx.pos_stop]
    if len(sx.times) and sx.pos_start.min() < len(sx.by_start):
        at = at - _suffix(vals[sx.by_start])[sx.pos_start]
    return at


@dataclass
class PLStats:
    """Log partial likelihood and risk-set summaries at one ``theta``.

    ``s0`` is scaled by ``exp(-shift)``; ratios such as ``ebar`` are exact.
    """

    loglik: float
    score: np.ndarray | None
    information: np.ndarray | None
    d: np.ndarray
    s0: np.ndarray
    ebar: np.ndarray | None
    shift: float
    logr: np.ndarray
    grad: np.ndarray | None


def evaluate(cohort: Cohort, rr: RelRisk, theta, order: int = 2) -> PLStats:
    """Log partial likelihood, score (order >= 1) and information (order 2).

    Raises:
        DegenerateRiskSetError: if a risk-set sum is zero or not finite.
    """
    theta = np.asarray(theta, dtype=float)
    idx = risk_set_index(cohort)
    logr, grad, hess = rr.log_terms(theta, order)
    if not np.all(np.isfinite(logr)):
        raise DegenerateRiskSetError("relative risk is not finite")
    shift = float(logr.max())
    rw = cohort.row_weight
    wr = rw * np.exp(logr - shift)
    ev_rows, ev_k = idx.event_rows, idx.event_k
    d = np.bincount(ev_k, weights=rw[ev_rows], minlength=idx.n_times)

    s0 = np.empty(idx.n_times)
    for s, sx in enumerate(idx.strata):
        s0[idx.offsets[s]:idx.offsets[s + 1]] = _risk_sums(sx, wr)
    if not (np.all(np.isfinite(s0)) and np.all(s0 > 0)):
        raise DegenerateRiskSetError("degenerate risk set")
    loglik = float(np.sum(rw[ev_rows] * (logr[ev_rows] - shift)) - np.sum(d * np.log(s0)))
    if order == 0:
        return PLStats(loglik, None, None, d, s0, None, shift, logr, None)

    q = grad.shape[1]
    wrg = wr[:, None] * grad
    ebar = np.empty((idx.n_times, q))
    for s, sx in enumerate(idx.strata):
        sl = slice(idx.offsets[s], idx.offsets[s + 1])
        ebar[sl] = _risk_sums(sx, wrg) / s0[sl, None]
    score = (rw[ev_rows, None] * grad[ev_rows]).sum(axis=0) - (d[:, None] * ebar).sum(axis=0)
    if order == 1:
        return PLStats(loglik, score, None, d, s0, ebar, shift, logr, grad)

    second = grad[:, :, None] * grad[:, None, :]
    if hess is not None:
        second = second + hess
    s2 = np.empty((idx.n_times, q, q))
    for s, sx in enumerate(idx.strata):
        sl = slice(idx.offsets[s], idx.offsets[s + 1])
        s2[sl] = _risk_sums(sx, wr[:, None, None] * second) / s0[sl, None, None]
    info = np.einsum("k,kij->ij", d, s2 - ebar[:, :, None] * ebar[:, None, :])
    if hess is not None:
        info = info - np.einsum("r,rij->ij", rw[ev_rows], hess[ev_rows])
    info = 0.5 * (info + info.T)
    return PLStats(loglik, score, info, d, s0, ebar, shift, logr, grad)


def log_partial_likelihood(cohort: Cohort, rr: RelRisk, theta) -> float:
    return evaluate(cohort, rr, theta, order=0).loglik


def score(cohort: Cohort, rr: RelRisk, theta) -> np.ndarray:
    return evaluate(cohort, rr, theta, order=1).score


def information(cohort: Cohort, rr: RelRisk, theta) -> np.ndarray:
    """Observed information, the negative Hessian of the log partial likelihood."""
    return evaluate(cohort, rr, theta, order=2).information


def breslow_baseline(cohort: Cohort, rr: RelRisk, theta) -> Baseline:
    """Breslow estimate of the cumulative baseline hazard in each stratum."""
    st = evaluate(cohort, rr, theta, order=0)
    idx = risk_set_index(cohort)
    jumps = st.d / st.s0 * np.exp(-st.shift)
    strata = {}
    for s, sx in enumerate(idx.strata):
        sl = slice(idx.offsets[s], idx.offsets[s + 1])
        label = idx.labels[s]
        key = label.item() if isinstance(label, np.generic) else label
        strata[key] = StepFunction(sx.times, np.cumsum(jumps[sl]))
    return Baseline(strata)


def score_residuals(cohort: Cohort, rr: RelRisk, theta, stats: PLStats | None = None) -> np.ndarray:
    """Per-subject score contributions with the baseline hazard profiled out.

    For subject ``i`` this is ``int (g_i - Ebar) dM_i`` with the Breslow
    increments in place of the unknown baseline, summed over the subject's rows.
    """
    if stats is None or stats.ebar is None:
        stats = evaluate(cohort, rr, theta, order=1)
    idx = risk_set_index(cohort)
    g = stats.grad
    q = g.shape[1]
    r = np.exp(stats.logr - stats.shift)
    haz = stats.d / stats.s0
    res_rows = np.zeros((cohort.n_rows, q))
    ev_rows, ev_k = idx.event_rows, idx.event_k
    res_rows[ev_rows] = g[ev_rows] - stats.ebar[ev_k]
    for s, sx in enumerate(idx.strata):
        sl = slice(idx.offsets[s], idx.offsets[s + 1])
        cum_a = np.concatenate([[0.0], np.cumsum(haz[sl])])
        cum_b = np.vstack([np.zeros((1, q)), np.cumsum(haz[sl, None] * stats.ebar[sl], axis=0)])
        a = cum_a[sx.k_stop] - cum_a[sx.k_start]
        b = cum_b[sx.k_stop] - cum_b[sx.k_start]
        rows = sx.rows
        res_rows[rows] -= r[rows, None] * (g[rows] * a[:, None] - b)
    out = np.zeros((cohort.n, q))
    np.add.at(out, cohort.row_subject, res_rows)
    return out


@dataclass
class OptimResult:
    theta: np.ndarray
    stats: PLStats
    converged: bool
    iterations: int
    message: str = ""


def newton_direction(info: np.ndarray, score_vec: np.ndarray) -> np.ndarray:
    """Solve ``info @ step = score``, adding Levenberg damping if ``info`` is not positive definite."""
    q = len(score_vec)
    if q == 0:
        return np.zeros(0)
    scale = max(float(np.max(np.abs(np.diag(info)))), 1e-12)
    damp = 0.0
    for _ in range(30):
        try:
            chol = np.linalg.cholesky(info + damp * np.eye(q))
            y = np.linalg.solve(chol, score_vec)
            return np.linalg.solve(chol.T, y)
        except np.linalg.LinAlgError:
            damp = scale * 1e-6 if damp == 0.0 else damp * 10.0
    raise EstimationError("singular information")


def maximize(cohort: Cohort, rr: RelRisk, theta0, box=BOX, tol: float = 1e-8,
             step_tol: float = 1e-10, max_iter: int = 100) -> OptimResult:
    """Maximise the log partial likelihood by projected Newton with step halving.

    Coordinates pinned at a box edge with the score pointing outward are held
    fixed. Convergence is declared when the free score components fall below
    ``tol`` in absolute value or the accepted step is shorter than ``step_tol``.
    """
    lo, hi = box
    theta = np.clip(np.asarray(theta0, dtype=float), lo, hi)
    try:
        st = evaluate(cohort, rr, theta, order=2)
    except DegenerateRiskSetError as exc:
        return OptimResult(theta, None, False, 0, str(exc))
    for it in range(1, max_iter + 1):
        u = st.score
        pinned = ((theta <= lo) & (u < 0)) | ((theta >= hi) & (u > 0))
        free = ~pinned
        if not np.any(free) or np.max(np.abs(u[free])) < tol:
            return OptimResult(theta, st, True, it - 1)
        step = np.zeros_like(theta)
        try:
            step[free] = newton_direction(st.information[np.ix_(free, free)], u[free])
        except EstimationError as exc:
            return OptimResult(theta, st, False, it, str(exc))
        slack = 1e-12 * (1.0 + abs(st.loglik))
        t = 1.0
        accepted = None
        for _ in range(40):
            trial = np.clip(theta + t * step, lo, hi)
            try:
                cand = evaluate(cohort, rr, trial, order=2)
            except DegenerateRiskSetError:
                cand = None
            if cand is not None and np.isfinite(cand.loglik) and cand.loglik >= st.loglik - slack:
                accepted = (trial, cand)
                break
            t *= 0.5
        if accepted is None:
            return OptimResult(theta, st, False, it, "line search failed")
        moved = np.max(np.abs(accepted[0] - theta))
        theta, st = accepted
        if moved < step_tol:
            return OptimResult(theta, st, True, it)
    return OptimResult(theta, st, False, max_iter, "iteration limit reached")
