"""Limiting values of the Naive, RC1, RC2 and RR1 estimators.

Each of these estimators solves a partial likelihood score whose probability
limit is

    q(theta) = int_0^t* [ E{Y(t) lam(t|X) v(W)} - s1(t) / s0(t) E{Y(t) lam(t|X)} ] dt,

with ``s_k(t) = E{Y(t) r(theta, W) v(W)^k}``, ``r`` the working relative risk and
``v = d log r / d theta``. The limit ``theta_bar`` is the root of ``q``. The
expectations are Monte Carlo averages over draws of ``(X, W)``; the at-risk
indicator is replaced by its conditional probability ``exp(-Lambda(t|X))``,
which removes the event-time noise, and the time integral uses Gauss-Legendre
nodes (the first term integrates in closed form to ``E{v P(event | X)}``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from threshold_cox.domain import BOUND_CHECK, BOX, EstimationError, Method, ThetaVector
from threshold_cox.errormodel import ErrorModelParams, cond_mean_x, induced_log_rr, surrogate_pair

LIMIT_METHODS = (Method.NAIVE, Method.RC1, Method.RC2, Method.RR1)


@dataclass(frozen=True)
class LimitScenario:
    """Large-sample design: one standard-normal covariate measured with error."""

    beta0: float = math.log(1.5)
    omega0: float = math.log(2.0)
    tau: float = 0.0
    rho_xw: float = 0.8
    cum_incidence: float = 0.01
    t_star: float = 10.0
    mc_size: int = 200_000
    n_batches: int = 20
    t_nodes: int = 48

    def __post_init__(self):
        if not 0 < self.rho_xw <= 1:
            raise ValueError("rho_xw must lie in (0, 1]")
        if not 0 < self.cum_incidence < 1:
            raise ValueError("cum_incidence must lie in (0, 1)")
        if self.mc_size < 10_000:
            raise ValueError("mc_size must be at least 10^4")
        if self.n_batches < 2 or self.mc_size % self.n_batches:
            raise ValueError("n_batches must be at least 2 and divide mc_size")
        if not self.t_star > 0:
            raise ValueError("t_star must be positive")

    @property
    def sigma_u2(self) -> float:
        return 1.0 / self.rho_xw**2 - 1.0

    @property
    def theta0(self) -> np.ndarray:
        return np.array([self.beta0, self.omega0])

    def error_model(self) -> ErrorModelParams:
        return ErrorModelParams(alpha0=0.0, sigma_x2=1.0, sigma_u2=self.sigma_u2)

    def lambda0(self) -> float:
        from threshold_cox.simulate import ScenarioSpec

        sc = ScenarioSpec(cum_incidence=self.cum_incidence, t_star=self.t_star,
                          beta0=self.beta0, omega0=self.omega0,
                          tau_quantile=float(ndtr(self.tau)), rho_xw=self.rho_xw)
        return _calibrate_cached(sc)


_LAMBDA_CACHE: dict = {}


def _calibrate_cached(sc) -> float:
    from threshold_cox.simulate import calibrate_lambda0

    if sc not in _LAMBDA_CACHE:
        _LAMBDA_CACHE[sc] = calibrate_lambda0(sc)
    return _LAMBDA_CACHE[sc]


@dataclass(frozen=True)
class _Draws:
    x: np.ndarray
    w: np.ndarray
    hazard: np.ndarray      # lambda0 exp(beta0 X + omega0 (X - tau)_+)
    t: np.ndarray           # Gauss-Legendre nodes on [0, t*]
    tw: np.ndarray          # and weights


_DRAW_CACHE: dict = {}


def _draws(sc: LimitScenario, seed: int) -> _Draws:
    key = (sc, seed)
    if key not in _DRAW_CACHE:
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(sc.mc_size)
        w = x + math.sqrt(sc.sigma_u2) * rng.standard_normal(sc.mc_size)
        lam0 = sc.lambda0()
        hazard = lam0 * np.exp(sc.beta0 * x + sc.omega0 * np.maximum(x - sc.tau, 0.0))
        u, uw = np.polynomial.legendre.leggauss(sc.t_nodes)
        _DRAW_CACHE.clear()
        _DRAW_CACHE[key] = _Draws(x, w, hazard, 0.5 * sc.t_star * (u + 1), 0.5 * sc.t_star * uw)
    return _DRAW_CACHE[key]


def _working_model(method: Method, theta: np.ndarray, w: np.ndarray, sc: LimitScenario):
    """Log relative risk and its gradient for every draw of ``W``."""
    em = sc.error_model()
    if method is Method.RR1:
        mu = cond_mean_x(w, None, em)
        return induced_log_rr(theta[0], theta[1], sc.tau, mu, em.eta, order=1)
    v = surrogate_pair(method, w, None, em, sc.tau)
    return v @ theta, v


def limiting_score(method, theta, sc: LimitScenario, seed: int = 0, return_se: bool = False):
    """Monte Carlo estimate of the limiting score ``q(theta)`` per subject.

    Args:
        method: one of Naive, RC1, RC2, RR1.
        theta: ``(beta, omega)`` or a :class:`ThetaVector`.
        sc: the large-sample design.
        seed: seed of the ``(X, W)`` draws; the same seed gives common random numbers.
        return_se: also return the Monte Carlo standard error from batching.
    """
    method = Method.parse(method)
    if method not in LIMIT_METHODS:
        raise ValueError(f"limiting values are available for {[str(m) for m in LIMIT_METHODS]}")
    theta = theta.as_array() if isinstance(theta, ThetaVector) else np.asarray(theta, dtype=float)
    q, batches = _pooled_and_batches(method, theta, sc, seed)
    if not return_se:
        return q
    se = batches.std(axis=0, ddof=1) / math.sqrt(sc.n_batches)
    return q, se


def _pooled_and_batches(method: Method, theta: np.ndarray, sc: LimitScenario, seed: int):
    d = _draws(sc, seed)
    logr, v = _working_model(method, theta, d.w, sc)
    nb, m = sc.n_batches, sc.mc_size // sc.n_batches
    r = np.exp(logr - logr.max()).reshape(nb, m)
    v = v.reshape(nb, m, 2)
    hazard = d.hazard.reshape(nb, m)

    # int_0^t* E{Y lam v} dt = E{v P(event | X)}
    first = np.einsum("bi,bij->bj", -np.expm1(-hazard * sc.t_star), v)
    s0 = np.empty((sc.t_nodes, nb))
    s1 = np.empty((sc.t_nodes, nb, 2))
    s0t = np.empty((sc.t_nodes, nb))
    for k, tk in enumerate(d.t):
        surv = np.exp(-hazard * tk)
        rs = r * surv
        s0[k] = rs.sum(axis=1)
        s1[k] = np.einsum("bi,bij->bj", rs, v)
        s0t[k] = (hazard * surv).sum(axis=1)

    def score(first, s0, s1, s0t, size):
        second = np.einsum("k,kj->j", d.tw, s1 / s0[:, None] * s0t[:, None])
        return (first - second) / size

    pooled = score(first.sum(0), s0.sum(1), s1.sum(1), s0t.sum(1), sc.mc_size)
    batches = np.array([score(first[b], s0[:, b], s1[:, b], s0t[:, b], m) for b in range(nb)])
    return pooled, batches


def _fd_jacobian(method: Method, theta: np.ndarray, sc: LimitScenario, seed: int, h: float):
    jac = np.empty((2, 2))
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        jac[:, j] = (limiting_score(method, theta + e, sc, seed)
                     - limiting_score(method, theta - e, sc, seed)) / (2 * h)
    return jac


def _ascent_step(jac: np.ndarray, q: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Newton step, with positive curvature flipped so that it climbs the limiting likelihood.

    ``q`` is the gradient of a limiting log partial likelihood, which need not
    be concave away from its maximum (the induced relative risk is convex in
    ``theta``), so the plain Newton step can head for a saddle or run off.
    """
    sym = 0.5 * (jac + jac.T)
    vals, vecs = np.linalg.eigh(sym)
    if np.all(vals < 0):
        try:
            return -np.linalg.solve(jac, q)
        except np.linalg.LinAlgError:
            pass
    scale = np.max(np.abs(vals))
    if not scale > 0:
        raise EstimationError(f"singular limiting Jacobian at {theta.tolist()}")
    vals = np.maximum(np.abs(vals), 1e-8 * scale)
    return vecs @ ((vecs.T @ q) / vals)


def limiting_theta(method, sc: LimitScenario, seed: int = 0, theta0=(0.0, 0.0),
                   tol: float = 1e-9, max_iter: int = 100, fd_step: float = 1e-5,
                   max_step: float = 1.0, return_se: bool = False):
    """Root of the limiting score by Newton-Raphson.

    The Jacobian is a central finite difference of the Monte Carlo score; all
    evaluations share the same draws, so the score is a smooth function of
    ``theta`` and the iteration converges to the root for that sample. Where
    the Jacobian is not negative definite the step is taken along the
    eigen-modified Jacobian instead (see :func:`_ascent_step`). Steps are capped at ``max_step`` per component, kept inside the estimation box
    and halved until the score norm does not increase.

    Args:
        return_se: also return the Monte Carlo standard error of the root,
            the batch covariance of the score mapped through the inverse
            Jacobian.

    Raises:
        EstimationError: no convergence in ``max_iter`` iterations, a
            singular Jacobian, or a root on the edge of the box.
    """
    method = Method.parse(method)
    lo, hi = BOX
    theta = np.clip(np.asarray(theta0, dtype=float), lo, hi)
    trace = []
    q = limiting_score(method, theta, sc, seed)
    for _ in range(max_iter):
        step = _ascent_step(_fd_jacobian(method, theta, sc, seed, fd_step), q, theta)
        big = np.max(np.abs(step))
        if big > max_step:
            step = step * (max_step / big)
        for _ in range(30):
            cand = np.clip(theta + step, lo, hi)
            q_new = limiting_score(method, cand, sc, seed)
            if np.all(np.isfinite(q_new)) and np.linalg.norm(q_new) <= np.linalg.norm(q) * (1 + 1e-12):
                break
            step = 0.5 * step
        moved = np.max(np.abs(cand - theta))
        theta, q = cand, q_new
        trace.append((theta.tolist(), float(np.linalg.norm(q))))
        if moved < tol:
            if np.any(np.abs(theta) >= BOUND_CHECK):
                raise EstimationError(f"limiting value on the edge of the parameter box: {theta.tolist()}")
            out = ThetaVector.from_array(theta, sc.tau)
            if not return_se:
                return out
            _, batches = _pooled_and_batches(method, theta, sc, seed)
            cov_q = np.cov(batches, rowvar=False) / sc.n_batches
            inv = np.linalg.inv(_fd_jacobian(method, theta, sc, seed, fd_step))
            return out, np.sqrt(np.diag(inv @ cov_q @ inv.T))
    raise EstimationError(f"limiting score did not converge in {max_iter} iterations; "
                          f"trace: {trace[-5:]}")


def asymptotic_bias(method, sc: LimitScenario, seed: int = 0) -> np.ndarray:
    """``theta_bar - theta_0`` for ``(beta, omega)``."""
    return limiting_theta(method, sc, seed).as_array() - sc.theta0
