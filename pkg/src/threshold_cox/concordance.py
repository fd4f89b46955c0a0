"""Harrell's concordance index with measurement-error-aware risk markers.

A pair of subjects is comparable when the one with the shorter observed time
had an event, or when both leave at the same time and only the first of them
had an event. The pair is concordant when the earlier failure has the higher
marker; ties in the marker count one half.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from threshold_cox.domain import Baseline, Cohort, Method, ThetaVector, ThresholdCoxError
from threshold_cox.errormodel import ErrorModelParams, induced_log_rr, cond_mean_x, surrogate_pair

MARKER_KINDS = ("naive_form", "rc_form", "rr_form", "mpple_form")


@dataclass(frozen=True)
class MarkerSpec:
    """Predictive marker ``m(w, z)`` used to rank subjects.

    ``naive_form`` plugs the surrogate into the relative risk, ``rc_form``
    plugs in the calibrated covariates (``rc_variant`` RC1 or RC2),
    ``rr_form`` is the induced relative risk ``E[r(X, Z) | W, Z]`` and
    ``mpple_form`` the induced relative risk among those still at risk, which
    needs the fitted cumulative baseline hazard.
    """

    kind: str
    theta: ThetaVector
    em: ErrorModelParams | None = None
    baseline: Baseline | None = None
    rc_variant: str = "RC2"

    def __post_init__(self):
        if self.kind not in MARKER_KINDS:
            raise ValueError(f"marker kind must be one of {MARKER_KINDS}")
        if self.kind != "naive_form" and self.em is None:
            raise ValueError(f"{self.kind} needs error-model parameters")
        if self.kind == "mpple_form" and self.baseline is None:
            raise ValueError("mpple_form needs the fitted baseline hazard")
        if Method.parse(self.rc_variant) not in (Method.RC1, Method.RC2):
            raise ValueError("rc_variant must be RC1 or RC2")

    @classmethod
    def for_method(cls, method, theta: ThetaVector, em: ErrorModelParams | None = None,
                   baseline: Baseline | None = None) -> MarkerSpec:
        """The marker matching an estimation method's working model."""
        method = Method.parse(method)
        if method is Method.NAIVE:
            return cls("naive_form", theta)
        if method in (Method.RC1, Method.RC2):
            return cls("rc_form", theta, em, rc_variant=str(method))
        if method is Method.MPPLE:
            return cls("mpple_form", theta, em, baseline)
        return cls("rr_form", theta, em)

    def log_marker(self, w, z) -> np.ndarray:
        """Log marker per subject; not defined for ``mpple_form``."""
        th = self.theta
        z = np.asarray(z, dtype=float).reshape(len(w), -1)
        lin = z @ np.asarray(th.gamma) if th.p else np.zeros(len(w))
        if self.kind == "rr_form":
            mu = cond_mean_x(w, z, self.em)
            return lin + induced_log_rr(th.beta, th.omega, th.tau, mu, self.em.eta)
        if self.kind == "mpple_form":
            raise ValueError("the mpple marker depends on time; use c_index")
        method = Method.NAIVE if self.kind == "naive_form" else Method.parse(self.rc_variant)
        pair = surrogate_pair(method, w, z, self.em, th.tau)
        return lin + pair @ np.array([th.beta, th.omega])


def _fenwick_c(time: np.ndarray, event: np.ndarray, marker: np.ndarray) -> tuple[float, int]:
    """Concordant weight and number of comparable pairs in ``O(n log n)``."""
    _, rank = np.unique(marker, return_inverse=True)
    size = rank.max() + 2
    tree = np.zeros(size, dtype=np.int64)

    def add(i):
        i += 1
        while i < size:
            tree[i] += 1
            i += i & -i

    def below(i):  # number of inserted ranks < i
        s = 0
        while i > 0:
            s += tree[i]
            i -= i & -i
        return s

    order = np.lexsort((event, -time))
    inserted = 0
    conc2 = 0  # twice the concordant weight
    pairs = 0
    k = 0
    n = len(time)
    while k < n:
        j = k
        while j < n and time[order[j]] == time[order[k]]:
            j += 1
        group = order[k:j]
        cens = group[event[group] == 0]
        evs = group[event[group] == 1]
        for i in cens:
            add(rank[i])
            inserted += 1
        for i in evs:
            lo = below(rank[i])
            le = below(rank[i] + 1)
            conc2 += 2 * lo + (le - lo)
            pairs += inserted
        for i in evs:
            add(rank[i])
            inserted += 1
        k = j
    return conc2 / 2.0, pairs


def c_index(cohort: Cohort, ms: MarkerSpec) -> float:
    """Harrell's C for the marker evaluated at each subject's baseline covariates.

    For ``mpple_form`` the marker of both members of a pair is evaluated at
    the baseline cumulative hazard just before the earlier failure time, so
    that the ranking uses the hazard ratio in force at that time.
    """
    rows = cohort.first_row
    w, z = cohort.w[rows], cohort.z[rows]
    time, event = cohort.exit, cohort.event.astype(np.int64)
    if ms.kind != "mpple_form":
        conc, pairs = _fenwick_c(time, event, ms.log_marker(w, z))
    else:
        conc, pairs = _mpple_pairs(cohort, ms, w, z)
    if pairs == 0:
        raise ThresholdCoxError("no comparable pairs")
    return conc / pairs


def _mpple_pairs(cohort: Cohort, ms: MarkerSpec, w, z) -> tuple[float, int]:
    from threshold_cox.mpple import log_pseudo_relrisk

    time, event = cohort.exit, cohort.event
    labels, codes = cohort.strata_codes
    conc = 0.0
    pairs = 0
    ev = np.flatnonzero(event == 1)
    for t in np.unique(time[ev]):
        at_t = ev[time[ev] == t]
        comparable = (time > t) | ((time == t) & (event == 0))
        if not comparable.any():
            continue
        for s in np.unique(codes[at_t]):
            c = ms.baseline.left_limit(t, labels[s].item() if len(labels) > 1 else None)
            phi = log_pseudo_relrisk(w, z, ms.em, ms.theta, c)
            for i in at_t[codes[at_t] == s]:
                other = phi[comparable]
                conc += np.sum(other < phi[i]) + 0.5 * np.sum(other == phi[i])
                pairs += other.size
    return conc, pairs
