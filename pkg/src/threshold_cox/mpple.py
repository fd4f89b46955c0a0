"""Maximum pseudo-partial likelihood estimation (MPPLE).

Without the rare disease approximation the hazard given the surrogate is
``lambda0(t) exp(phi(theta, w, z, Lambda0(t-)))`` with

    exp(phi) = E[r(X) exp(-c r(X)) | W, Z] / E[exp(-c r(X)) | W, Z],

the conditional mean of the relative risk among those still event-free when
the cumulative baseline hazard is ``c``. The expectations are computed by
Gauss-Hermite quadrature over ``X | W, Z ~ N(mu, eta^2)``. The baseline enters
through a Breslow-type recursion: the increment at an event time is the
number of events divided by the risk-set sum of ``exp(phi)`` evaluated at the
cumulative hazard accumulated before that time.

Estimation alternates between rebuilding the baseline at the current
``theta`` and a Newton step on the resulting pseudo-partial score. The step
uses the total derivative of the score, including its dependence on the
baseline, which is obtained by an adjoint sweep over event times.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from threshold_cox.domain import (
    BOX, Baseline, Cohort, EstimationError, FitResult, Method, StepFunction, ThetaVector,
    within_bound,
)
from threshold_cox.errormodel import ErrorModelParams, cond_mean_x
from threshold_cox.variance import (
    NuisanceScore, nuisance_corrected_from_parts, nuisance_score_derivative, sandwich_from_parts,
)

N_NODES = 20


@njit(cache=True, fastmath=True, inline="always")
def _exp_phi(j, c, rexp, logu):
    """``exp(phi)`` for subject ``j`` at cumulative hazard ``c``."""
    n_nodes = logu.shape[0]
    m = -np.inf
    for nn in range(n_nodes):
        h = logu[nn] - c * rexp[j, nn]
        if h > m:
            m = h
    sd = 0.0
    sn = 0.0
    for nn in range(n_nodes):
        a = np.exp(logu[nn] - c * rexp[j, nn] - m)
        sd += a
        sn += a * rexp[j, nn]
    return sn / sd


@njit(cache=True, fastmath=True)
def _recursion(rexp, logu, entry, weight, times, nrisk, d):
    """Baseline increments; subjects are stored latest exit first, so the
    candidates for the risk set at ``times[k]`` are the first ``nrisk[k]``."""
    n_times = times.shape[0]
    dlam = np.empty(n_times)
    c = 0.0
    for k in range(n_times):
        t = times[k]
        s0 = 0.0
        for j in range(nrisk[k]):
            if entry[j] >= t:
                continue
            s0 += weight[j] * _exp_phi(j, c, rexp, logu)
        if not (s0 > 0.0) or not np.isfinite(s0):
            dlam[k] = np.nan
            return dlam
        dlam[k] = d[k] / s0
        c += dlam[k]
    return dlam


@functools.lru_cache(maxsize=None)
def _pass_kernel(n_params: int):
    """Compile the main sweep for a fixed parameter dimension.

    A compile-time dimension lets the compiler unroll the small inner loops,
    which dominate the cost. Closures are not cached on disk, so each process
    compiles once per dimension.
    """

    @njit(fastmath=True, inline="always")
    def _moments(j, c, rexp, logu, v, m1, m2, m3, q1, q2, q3, xi, dxi, xic):
        """``exp(phi)`` and ``d phi/dc``; fills ``xi``, ``d xi/d theta`` and ``d xi/dc``.

        ``xi`` is the gradient of ``phi`` in ``theta`` at fixed ``c``. Node weights
        ``a_n = u_n exp(-c r_n)`` define two tilted laws, ``pi`` proportional to
        ``a`` and ``rho`` proportional to ``a r``; every quantity is a combination
        of the power sums ``sum_n a_n r_n^k v_n`` and ``sum_n a_n r_n^k v_n v_n'``.
        """
        n_nodes = logu.shape[0]
        q = n_params
        m = -np.inf
        for nn in range(n_nodes):
            h = logu[nn] - c * rexp[j, nn]
            if h > m:
                m = h
        sd = 0.0
        sn = 0.0
        srr = 0.0
        for a in range(q):
            m1[a] = 0.0
            m2[a] = 0.0
            m3[a] = 0.0
            for b in range(a, q):
                q1[a, b] = 0.0
                q2[a, b] = 0.0
                q3[a, b] = 0.0
        for nn in range(n_nodes):
            r = rexp[j, nn]
            w0 = np.exp(logu[nn] - c * r - m)
            w1 = w0 * r
            w2 = w1 * r
            w3 = w2 * r
            sd += w0
            sn += w1
            srr += w2
            for a in range(q):
                va = v[j, nn, a]
                m1[a] += w1 * va
                m2[a] += w2 * va
                m3[a] += w3 * va
                for b in range(a, q):
                    vab = va * v[j, nn, b]
                    q1[a, b] += w1 * vab
                    q2[a, b] += w2 * vab
                    q3[a, b] += w3 * vab
        isd = 1.0 / sd
        isn = 1.0 / sn
        er_pi = sn * isd
        er_rho = srr * isn
        for a in range(q):
            xin_a = (m1[a] - c * m2[a]) * isn
            xid_a = -c * m1[a] * isd
            xi[a] = xin_a - xid_a
            xic[a] = (-(2.0 * m2[a] - c * m3[a]) * isn + (m1[a] - c * m2[a]) * isd
                      + xin_a * er_rho - xid_a * er_pi)
            # m1 and m2 now hold the tilted means used below
            m2[a] = xid_a
            m1[a] = xin_a
        for a in range(q):
            for b in range(a, q):
                val = ((q1[a, b] - 3.0 * c * q2[a, b] + c * c * q3[a, b]) * isn
                       + c * (q1[a, b] - c * q2[a, b]) * isd
                       - m1[a] * m1[b] + m2[a] * m2[b])
                dxi[a, b] = val
                dxi[b, a] = val
        return er_pi, er_pi - er_rho

    @njit(fastmath=True)
    def _profile_pass(rexp, logu, v, entry, weight, times, nrisk, d, ev_ptr, ev_idx):
        """Rebuild the baseline and accumulate score pieces in one sweep.

        The cumulative hazard used at ``times[k]`` is the sum of the increments
        before it, so each risk-set sum serves both the recursion and the score.
        """
        n = v.shape[0]
        q = n_params
        n_times = times.shape[0]
        dlam = np.zeros(n_times)
        score = np.zeros(q)
        jac = np.zeros((q, q))
        omega = np.zeros((q, q))
        loglik = 0.0
        s0_out = np.zeros(n_times)
        s0c_out = np.zeros(n_times)
        ebar_out = np.zeros((n_times, q))
        dgdc = np.zeros((n_times, q))
        resid = np.zeros((n, q))
        xi = np.empty(q)
        dxi = np.empty((q, q))
        xic = np.empty(q)
        m1 = np.empty(q)
        m2 = np.empty(q)
        m3 = np.empty(q)
        q1 = np.empty((q, q))
        q2 = np.empty((q, q))
        q3 = np.empty((q, q))
        xi_store = np.empty((n, q))
        ephi_store = np.empty(n)
        s1 = np.empty(q)
        s1c = np.empty(q)
        s2 = np.empty((q, q))
        sxx = np.empty((q, q))
        ck = 0.0
        for k in range(n_times):
            t = times[k]
            s0 = 0.0
            s0c = 0.0
            for aa in range(q):
                s1[aa] = 0.0
                s1c[aa] = 0.0
                for bb in range(q):
                    s2[aa, bb] = 0.0
                    sxx[aa, bb] = 0.0
            for j in range(nrisk[k]):
                if entry[j] >= t:
                    ephi_store[j] = 0.0
                    continue
                ephi, phic = _moments(j, ck, rexp, logu, v, m1, m2, m3, q1, q2, q3, xi, dxi, xic)
                wj = weight[j] * ephi
                s0 += wj
                s0c += wj * phic
                for aa in range(q):
                    s1[aa] += wj * xi[aa]
                    s1c[aa] += wj * (phic * xi[aa] + xic[aa])
                    xi_store[j, aa] = xi[aa]
                    for bb in range(q):
                        s2[aa, bb] += wj * (dxi[aa, bb] + xi[aa] * xi[bb])
                        sxx[aa, bb] += wj * xi[aa] * xi[bb]
                ephi_store[j] = ephi
            if not (s0 > 0.0) or not np.isfinite(s0):
                dlam[:] = np.nan
                return dlam, score, jac, omega, loglik, s0_out, s0c_out, ebar_out, dgdc, resid
            dlam[k] = d[k] / s0
            ebar = s1 / s0
            s0_out[k] = s0
            s0c_out[k] = s0c
            ebar_out[k] = ebar
            loglik -= d[k] * np.log(s0)
            for aa in range(q):
                score[aa] -= d[k] * ebar[aa]
                dgdc[k, aa] -= d[k] * (s1c[aa] / s0 - ebar[aa] * s0c / s0)
                for bb in range(q):
                    jac[aa, bb] += d[k] * (s2[aa, bb] / s0 - ebar[aa] * ebar[bb])
                    omega[aa, bb] += d[k] * (sxx[aa, bb] / s0 - ebar[aa] * ebar[bb])
            for e in range(ev_ptr[k], ev_ptr[k + 1]):
                i = ev_idx[e]
                ephi, phic = _moments(i, ck, rexp, logu, v, m1, m2, m3, q1, q2, q3, xi, dxi, xic)
                wi = weight[i]
                loglik += wi * np.log(ephi)
                for aa in range(q):
                    score[aa] += wi * xi[aa]
                    dgdc[k, aa] += wi * xic[aa]
                    resid[i, aa] += xi[aa] - ebar[aa]
                    for bb in range(q):
                        jac[aa, bb] -= wi * dxi[aa, bb]
            for j in range(nrisk[k]):
                f = d[k] * ephi_store[j] / s0
                for aa in range(q):
                    resid[j, aa] -= f * (xi_store[j, aa] - ebar[aa])
            ck += dlam[k]
        return dlam, score, jac, omega, loglik, s0_out, s0c_out, ebar_out, dgdc, resid

    return _profile_pass


@njit(cache=True, fastmath=True)
def _adjoint_weights(rexp, logu, entry, times, nrisk, cum, coef, a_next, out):
    """Accumulate ``-sum_k Y_jk exp(phi_jk) coef_k a_{k+1}`` into ``out[j]``."""
    q = a_next.shape[1]
    for k in range(times.shape[0]):
        t = times[k]
        for j in range(nrisk[k]):
            if entry[j] >= t:
                continue
            f = _exp_phi(j, cum[k], rexp, logu) * coef[k]
            for aa in range(q):
                out[j, aa] -= f * a_next[k, aa]


@dataclass
class _Stratum:
    """One stratum with its subjects stored latest exit first."""

    subjects: np.ndarray   # cohort indices in storage order
    v: np.ndarray          # node design, (n_s, nodes, q)
    entry: np.ndarray
    weight: np.ndarray
    times: np.ndarray
    nrisk: np.ndarray      # leading subjects with exit >= each event time
    d: np.ndarray
    ev_ptr: np.ndarray
    ev_idx: np.ndarray     # storage positions of the events at each time
    label: object


@dataclass
class _Profile:
    """Pseudo-partial score and its pieces at one ``theta``."""

    score: np.ndarray
    jac_partial: np.ndarray
    jac_total: np.ndarray
    omega: np.ndarray
    loglik: float
    dlams: list
    residuals: np.ndarray | None
    _pending: list = field(default=None, repr=False)


class MppleProblem:
    """Quadrature design and risk-set bookkeeping for one cohort and error model."""

    def __init__(self, cohort: Cohort, em: ErrorModelParams, tau: float, n_nodes: int = N_NODES):
        if not cohort.time_fixed:
            raise EstimationError("MPPLE requires time-independent covariates")
        self.cohort = cohort
        self.q = cohort.p + 2
        nodes, wts = np.polynomial.hermite.hermgauss(n_nodes)
        self.logu = np.log(wts / np.sqrt(np.pi))
        mu = cond_mean_x(cohort.w, cohort.z, em)
        x = mu[:, None] + np.sqrt(2.0) * em.eta * nodes[None, :]
        v = np.empty((cohort.n, n_nodes, self.q))
        v[:, :, :cohort.p] = cohort.z[:, None, :]
        v[:, :, cohort.p] = x
        v[:, :, cohort.p + 1] = np.maximum(x - tau, 0.0)
        self.strata = []
        labels, codes = cohort.strata_codes
        for s, label in enumerate(labels):
            subj = np.flatnonzero(codes == s)
            subj = subj[np.argsort(-cohort.exit[subj], kind="stable")]
            exit_, event = cohort.exit[subj], cohort.event[subj]
            weight = cohort.weight[subj]
            ev_pos = np.flatnonzero(event == 1)
            times, inv = np.unique(exit_[ev_pos], return_inverse=True)
            by_time = np.argsort(inv, kind="stable")
            counts = np.bincount(inv, minlength=len(times))
            self.strata.append(_Stratum(
                subjects=subj, v=np.ascontiguousarray(v[subj]), entry=cohort.entry[subj],
                weight=weight, times=times,
                nrisk=np.searchsorted(-exit_, -times, side="right"),
                d=np.bincount(inv, weights=weight[ev_pos], minlength=len(times)),
                ev_ptr=np.concatenate([[0], np.cumsum(counts)]).astype(np.int64),
                ev_idx=ev_pos[by_time].astype(np.int64), label=label,
            ))

    def baseline_increments(self, theta) -> list:
        """Recursive baseline increments at ``theta``, one array per stratum."""
        out = []
        for st in self.strata:
            rexp = np.exp(st.v @ theta)
            dlam = _recursion(rexp, self.logu, st.entry, st.weight, st.times, st.nrisk, st.d)
            if not np.all(np.isfinite(dlam)):
                raise EstimationError("degenerate risk set")
            out.append(dlam)
        return out

    def profile(self, theta, influence: bool = False) -> _Profile:
        """Score and Jacobians with the baseline rebuilt at ``theta``.

        The total Jacobian includes the dependence of the rebuilt baseline on
        ``theta``. With ``influence`` the per-subject derivatives of the score
        with respect to the subject weights are computed as well; they can
        also be added later with :meth:`add_influence`.
        """
        theta = np.asarray(theta, dtype=float)
        q = self.q
        score = np.zeros(q)
        jac = np.zeros((q, q))
        jac_tot = np.zeros((q, q))
        omega = np.zeros((q, q))
        loglik = 0.0
        dlams, pending = [], []
        for st in self.strata:
            rexp = np.exp(st.v @ theta)
            dlam, sc, jp, om, ll, s0, s0c, ebar, dgdc, res = _pass_kernel(q)(
                rexp, self.logu, st.v, st.entry, st.weight, st.times, st.nrisk, st.d,
                st.ev_ptr, st.ev_idx)
            if not np.all(np.isfinite(dlam)):
                raise EstimationError("degenerate risk set")
            dlams.append(dlam)
            score += sc
            jac += jp
            omega += om
            loglik += ll
            # adjoint sweep: a_next[k] is the total derivative of the score with
            # respect to the cumulative hazard just after event time k
            n_t = len(st.times)
            a_next = np.zeros((n_t, q))
            acc = np.zeros(q)
            dlam_dc = -dlam * s0c / s0
            for k in range(n_t - 1, -1, -1):
                a_next[k] = acc
                acc = dgdc[k] + acc * (1.0 + dlam_dc[k])
            jac_tot += jp + (dlam[:, None] * a_next).T @ ebar
            pending.append((rexp, dlam, s0, a_next, res))
        prof = _Profile(score, jac, jac_tot, omega, loglik, dlams, None)
        prof._pending = pending
        if influence:
            self.add_influence(prof)
        return prof

    def add_influence(self, prof: _Profile) -> _Profile:
        """Complete the per-subject weight derivatives of the score."""
        if prof.residuals is not None:
            return prof
        resid = np.zeros((self.cohort.n, self.q))
        for st, (rexp, dlam, s0, a_next, res) in zip(self.strata, prof._pending):
            res = res.copy()
            cum = np.concatenate([[0.0], np.cumsum(dlam)[:-1]])
            _adjoint_weights(rexp, self.logu, st.entry, st.times, st.nrisk, cum,
                             dlam / s0, a_next, res)
            k_of_event = np.repeat(np.arange(len(st.times)), np.diff(st.ev_ptr))
            res[st.ev_idx] += a_next[k_of_event] / s0[k_of_event, None]
            resid[st.subjects] = res
        prof.residuals = resid
        return prof

    def baseline(self, dlams) -> Baseline:
        strata = {}
        for st, dlam in zip(self.strata, dlams):
            key = st.label.item() if isinstance(st.label, np.generic) else st.label
            strata[key] = StepFunction(st.times, np.cumsum(dlam))
        return Baseline(strata)


def solve_mpple(problem: MppleProblem, theta0, box=BOX, tol: float = 1e-6,
                max_iter: int = 50, max_step: float = 1.0):
    """Alternate baseline reconstruction and Newton steps until both settle.

    Returns ``(theta, profile, converged, iterations)``; the profile is
    evaluated at the returned ``theta``.
    """
    lo, hi = box
    theta = np.clip(np.asarray(theta0, dtype=float), lo, hi)
    prev_cum = None
    for it in range(1, max_iter + 1):
        prof = problem.profile(theta)
        cum = np.concatenate([np.cumsum(dl) for dl in prof.dlams])
        try:
            step = np.linalg.solve(prof.jac_total, prof.score)
            if not np.all(np.isfinite(step)):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            try:
                step = np.linalg.solve(prof.jac_partial, prof.score)
            except np.linalg.LinAlgError:
                raise EstimationError("singular information") from None
        big = np.max(np.abs(step))
        if big > max_step:
            step = step * (max_step / big)
        new = np.clip(theta + step, lo, hi)
        moved = np.max(np.abs(new - theta))
        drift = np.inf if prev_cum is None else np.max(np.abs(cum - prev_cum))
        if moved < tol and drift < tol:
            return theta, prof, True, it
        # a coordinate pinned at the box with the score pushing outward stays put
        if moved == 0.0 and np.all((theta <= lo) | (theta >= hi)):
            return theta, prof, drift < tol, it
        theta, prev_cum = new, cum
    prof = problem.profile(theta)
    return theta, prof, False, max_iter


def log_pseudo_relrisk(w, z, em: ErrorModelParams, theta: ThetaVector, c,
                       n_nodes: int = N_NODES) -> np.ndarray:
    """``phi = log E[r exp(-c r) | W, Z] - log E[exp(-c r) | W, Z]`` per subject.

    Args:
        w, z: surrogate and error-free covariates of the subjects.
        theta: parameters of the relative risk ``r``.
        c: cumulative baseline hazard, scalar or one value per subject.
    """
    w = np.asarray(w, dtype=float)
    nodes, wts = np.polynomial.hermite.hermgauss(n_nodes)
    logu = np.log(wts / np.sqrt(np.pi))
    x = cond_mean_x(w, z, em)[:, None] + np.sqrt(2.0) * em.eta * nodes[None, :]
    logr = theta.beta * x + theta.omega * np.maximum(x - theta.tau, 0.0)
    if len(theta.gamma):
        logr = logr + (np.asarray(z, dtype=float).reshape(len(w), -1) @ np.asarray(theta.gamma))[:, None]
    c = np.broadcast_to(np.asarray(c, dtype=float), w.shape)[:, None]
    h = logu - c * np.exp(logr)
    shift = h.max(axis=1, keepdims=True)
    a = np.exp(h - shift)
    return np.log((a * np.exp(logr)).sum(axis=1)) - np.log(a.sum(axis=1))


def ij_covariance(prof: _Profile, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Infinitesimal-jackknife covariance and its meat.

    Each subject's influence is the total derivative of the score with
    respect to its weight, mapped through the inverse total Jacobian.
    """
    h = prof.residuals * weights[:, None]
    meat = h.T @ h
    return sandwich_from_parts(prof.jac_total, meat), meat


def fit_mpple(cohort: Cohort, em: ErrorModelParams, tau: float, theta0=None,
              covariance: str = "ij", nuisance: NuisanceScore | None = None,
              level: float = 0.95, bootstrap=None, n_nodes: int = N_NODES) -> FitResult:
    """MPPLE fit.

    Args:
        theta0: starting value; the RR1 estimate is a good choice.
        covariance: ``"ij"`` for the infinitesimal jackknife (default),
            ``"model"`` for the inverse of the model-based information, or
            ``"bootstrap"`` for a weighted bootstrap using ``bootstrap``.
        nuisance: estimating functions of a reliability study; adds the
            variability of estimated error-model parameters to the IJ covariance.
    """
    from threshold_cox.estimators import BootstrapConfig, bootstrap_weights

    problem = MppleProblem(cohort, em, tau, n_nodes)
    theta0 = np.zeros(problem.q) if theta0 is None else theta0
    theta, prof, converged, iters = solve_mpple(problem, theta0)
    fit = FitResult(method=Method.MPPLE, theta_hat=ThetaVector.from_array(theta, tau),
                    converged=converged, within_bound=within_bound(theta), iterations=iters,
                    baseline=problem.baseline(prof.dlams), level=level)
    fit.details.update(loglik=prof.loglik, score=prof.score)
    try:
        if covariance == "ij":
            problem.add_influence(prof)
            cov, meat = ij_covariance(prof, cohort.weight)
            if nuisance is not None:
                def score_at(e):
                    return MppleProblem(cohort, e, tau, n_nodes).profile(theta).score
                u_phi = nuisance_score_derivative(score_at, em)
                cov = nuisance_corrected_from_parts(prof.jac_total, meat, u_phi, nuisance)
        elif covariance == "model":
            cov = sandwich_from_parts(prof.omega, prof.omega)
        elif covariance == "bootstrap":
            config = bootstrap or BootstrapConfig()
            rng = np.random.default_rng(config.seed)
            reps = []
            for _ in range(config.b):
                boot = cohort.reweighted(bootstrap_weights(cohort.n, rng, config.truncation))
                try:
                    th, _, ok, _ = solve_mpple(MppleProblem(boot, em, tau, n_nodes), theta)
                except EstimationError:
                    continue
                if ok and within_bound(th):
                    reps.append(th)
            if len(reps) < 2:
                raise EstimationError("bootstrap unstable")
            cov = np.atleast_2d(np.cov(np.array(reps), rowvar=False))
        else:
            raise ValueError(f"unknown covariance option {covariance!r}")
        fit.covariance = cov
    except EstimationError as exc:
        fit.details["covariance_error"] = str(exc)
    return fit
