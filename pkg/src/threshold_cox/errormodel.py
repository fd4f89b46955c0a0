"""Classical additive measurement error model and the induced quantities.

With ``W = X + U``, ``X | Z ~ N(alpha0 + alpha1'Z, sigma_x2)`` and
``U ~ N(0, sigma_u2)``, the true covariate given the surrogate is normal with
mean ``mu = (1 - lam)(alpha0 + alpha1'Z) + lam W`` and variance
``eta2 = sigma_x2 (1 - lam)`` where ``lam = sigma_x2 / sigma_w2``.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr, ndtr

from threshold_cox.domain import Method, ThetaVector, ThresholdCoxError


@dataclass(frozen=True)
class ErrorModelParams:
    alpha0: float = 0.0
    alpha1: tuple = ()
    sigma_x2: float = 1.0
    sigma_u2: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "alpha1", tuple(float(a) for a in np.atleast_1d(self.alpha1)))
        if not self.sigma_x2 > 0:
            raise ValueError("sigma_x2 must be positive")
        if not self.sigma_u2 >= 0:
            raise ValueError("sigma_u2 must be non-negative")

    @classmethod
    def from_reliability_ratio(cls, rho: float, sigma_x2: float = 1.0, alpha0: float = 0.0):
        """Error variance giving correlation ``rho`` between X and W."""
        if not 0 < rho <= 1:
            raise ValueError("rho must lie in (0, 1]")
        return cls(alpha0=alpha0, sigma_x2=sigma_x2, sigma_u2=sigma_x2 * (1.0 / rho**2 - 1.0))

    @classmethod
    def from_conditional(cls, intercept: float, slope: float, variance: float) -> ErrorModelParams:
        """Parameters reproducing ``E[X|W] = intercept + slope W`` and ``Var[X|W] = variance``.

        This is how Berkson-type inputs, where only the calibration line and the
        residual variance are known, enter the classical formulation.
        """
        if not 0 < slope <= 1:
            raise ValueError("calibration slope must lie in (0, 1]")
        if variance < 0:
            raise ValueError("conditional variance must be non-negative")
        if slope == 1.0:
            if variance > 0 or intercept != 0:
                raise ValueError("slope 1 requires zero variance and zero intercept")
            return cls(alpha0=0.0, sigma_x2=1.0, sigma_u2=0.0)
        sigma_x2 = variance / (1.0 - slope)
        if sigma_x2 <= 0:
            raise ValueError("conditional variance must be positive when slope < 1")
        sigma_w2 = sigma_x2 / slope
        return cls(alpha0=intercept / (1.0 - slope), sigma_x2=sigma_x2, sigma_u2=sigma_w2 - sigma_x2)

    @property
    def sigma_w2(self) -> float:
        return self.sigma_x2 + self.sigma_u2

    @property
    def lam(self) -> float:
        return self.sigma_x2 / self.sigma_w2

    @property
    def eta2(self) -> float:
        return self.sigma_x2 * (1.0 - self.lam)

    @property
    def eta(self) -> float:
        return float(np.sqrt(self.eta2))

    def mean_x(self, z=None) -> np.ndarray:
        base = self.alpha0
        if self.alpha1:
            base = base + np.asarray(z, dtype=float).reshape(-1, len(self.alpha1)) @ np.asarray(self.alpha1)
        return base

    def nuisance_vector(self) -> np.ndarray:
        """``(alpha0, sigma_x2, sigma_u2)``, the coordinates a reliability study estimates."""
        return np.array([self.alpha0, self.sigma_x2, self.sigma_u2])

    def with_nuisance(self, phi) -> ErrorModelParams:
        return ErrorModelParams(alpha0=float(phi[0]), alpha1=self.alpha1,
                                sigma_x2=float(phi[1]), sigma_u2=float(phi[2]))


def cond_mean_x(w, z, em: ErrorModelParams) -> np.ndarray:
    """``E[X | W=w, Z=z]``."""
    w = np.asarray(w, dtype=float)
    return (1.0 - em.lam) * em.mean_x(z) + em.lam * w


def _plus_mean(mu, eta, tau):
    mu = np.asarray(mu, dtype=float)
    if eta == 0.0:
        return np.maximum(mu - tau, 0.0)
    d = (tau - mu) / eta
    # ndtr(-d) rather than 1 - ndtr(d) keeps precision far in the upper tail
    val = ndtr(-d) * (mu - tau) + eta * np.exp(-0.5 * d * d) / np.sqrt(2 * np.pi)
    return np.maximum(val, 0.0)


def cond_plus_mean(w, z, em: ErrorModelParams, tau: float) -> np.ndarray:
    """``E[(X - tau)_+ | W=w, Z=z]`` under the normal conditional law."""
    return _plus_mean(cond_mean_x(w, z, em), em.eta, tau)


def induced_log_rr(beta: float, omega: float, tau: float, mu, eta: float, order: int = 0):
    """Log of ``E[exp(beta X + omega (X - tau)_+)]`` for ``X ~ N(mu, eta^2)``.

    The expectation splits at ``tau`` into two log-normal-type terms
    ``A = exp(beta mu + eta2 beta^2 / 2) Phi((tau - mu - eta2 beta) / eta)`` and
    ``B = exp(s mu - omega tau + eta2 s^2 / 2) Phi((mu - tau + eta2 s) / eta)``
    with ``s = beta + omega``. Both are handled in log space.

    Args:
        order: 0 returns ``log R``; 1 adds the gradient in ``(beta, omega)``;
            2 adds the Hessian.

    Returns:
        ``log R`` with shape of ``mu``, then optionally ``(..., 2)`` gradient and
        ``(..., 2, 2)`` Hessian of ``log R``.
    """
    mu = np.asarray(mu, dtype=float)
    if eta == 0.0:
        plus = np.maximum(mu - tau, 0.0)
        logr = beta * mu + omega * plus
        out = [logr]
        if order >= 1:
            out.append(np.stack([mu, plus], axis=-1))
        if order >= 2:
            out.append(np.zeros(mu.shape + (2, 2)))
        return out[0] if order == 0 else tuple(out)

    eta2 = eta * eta
    s = beta + omega
    la = beta * mu + 0.5 * eta2 * beta * beta
    ca = (tau - mu - eta2 * beta) / eta
    lb = s * mu - omega * tau + 0.5 * eta2 * s * s
    cb = (mu - tau + eta2 * s) / eta
    log_a = la + log_ndtr(ca)
    log_b = lb + log_ndtr(cb)
    logr = np.logaddexp(log_a, log_b)
    if order == 0:
        return logr

    pa = np.exp(log_a - logr)
    pb = np.exp(log_b - logr)
    ma = _mills(ca)
    mb = _mills(cb)
    # gradients of the exponents and of the Phi arguments
    gla = np.stack([eta2 * beta + mu, np.zeros_like(mu)], axis=-1)
    glb_0 = eta2 * s + mu
    glb = np.stack([glb_0, glb_0 - tau], axis=-1)
    gca = np.array([-eta, 0.0])
    gcb = np.array([eta, eta])
    ga = gla + ma[..., None] * gca
    gb = glb + mb[..., None] * gcb
    grad = pa[..., None] * ga + pb[..., None] * gb
    if order == 1:
        return logr, grad

    def rel_hess(gl, hl, m, c, gc):
        outer_lc = gl[..., :, None] * gc[None, :] + gc[:, None] * gl[..., None, :]
        return (gl[..., :, None] * gl[..., None, :] + hl
                + m[..., None, None] * outer_lc
                - (c * m)[..., None, None] * np.outer(gc, gc))

    hla = np.array([[eta2, 0.0], [0.0, 0.0]])
    hlb = eta2 * np.ones((2, 2))
    hess = (pa[..., None, None] * rel_hess(gla, hla, ma, ca, gca)
            + pb[..., None, None] * rel_hess(glb, hlb, mb, cb, gcb)
            - grad[..., :, None] * grad[..., None, :])
    return logr, grad, hess


def _mills(c):
    """``phi(c) / Phi(c)`` computed stably for very negative ``c``."""
    return np.exp(-0.5 * c * c - 0.5 * np.log(2 * np.pi) - log_ndtr(c))


def rr_cond_expectation(theta: ThetaVector, w, z, em: ErrorModelParams) -> np.ndarray:
    """``E[exp(beta X + omega (X - tau)_+) | W, Z]``.

    The ``exp(gamma'Z)`` factor of the relative risk is deliberately left out.
    """
    mu = cond_mean_x(w, z, em)
    return np.exp(induced_log_rr(theta.beta, theta.omega, theta.tau, mu, em.eta))


def rr_cond_gradient(theta: ThetaVector, w, z, em: ErrorModelParams) -> np.ndarray:
    """Gradient of :func:`rr_cond_expectation` in ``(beta, omega)``."""
    mu = cond_mean_x(w, z, em)
    logr, grad = induced_log_rr(theta.beta, theta.omega, theta.tau, mu, em.eta, order=1)
    return np.exp(logr)[..., None] * grad


def rr_cond_hessian(theta: ThetaVector, w, z, em: ErrorModelParams) -> np.ndarray:
    """Hessian of :func:`rr_cond_expectation` in ``(beta, omega)``."""
    mu = cond_mean_x(w, z, em)
    logr, grad, hess = induced_log_rr(theta.beta, theta.omega, theta.tau, mu, em.eta, order=2)
    r = np.exp(logr)
    return r[..., None, None] * (hess + grad[..., :, None] * grad[..., None, :])


def surrogate_pair(method: Method, w, z, em: ErrorModelParams | None, tau: float) -> np.ndarray:
    """Covariates ``(g1, g2)`` that replace ``(X, (X - tau)_+)`` in a plug-in fit.

    Naive uses ``(W, (W - tau)_+)``; RC1 uses ``(m, (m - tau)_+)`` with
    ``m = E[X|W,Z]``; RC2 uses ``(m, E[(X - tau)_+ | W, Z])``.
    """
    method = Method.parse(method)
    w = np.asarray(w, dtype=float)
    if method is Method.NAIVE:
        g1 = w
        g2 = np.maximum(w - tau, 0.0)
    elif method is Method.RC1:
        g1 = cond_mean_x(w, z, em)
        g2 = np.maximum(g1 - tau, 0.0)
    elif method is Method.RC2:
        g1 = cond_mean_x(w, z, em)
        g2 = _plus_mean(g1, em.eta, tau)
    else:
        raise ValueError(f"{method} has no surrogate covariate pair")
    return np.stack([g1, g2], axis=-1)


@dataclass(frozen=True)
class ReliabilityStudy:
    """Replicate surrogate measurements, one row per subject.

    Args:
        measurements: ``(m, k)`` array with ``k >= 2`` replicates per subject.
        z: optional ``(m, p)`` error-free covariates of the same subjects.
        subject_ids: optional labels, e.g. to pair subjects with a main study.
    """

    measurements: np.ndarray
    z: np.ndarray | None = None
    subject_ids: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        w = np.asarray(self.measurements, dtype=float)
        if w.ndim != 2 or w.shape[1] < 2:
            raise ValueError("a reliability study needs at least two replicates per subject")
        if w.shape[0] < 3:
            raise ValueError("a reliability study needs at least three subjects")
        if not np.all(np.isfinite(w)):
            raise ValueError("reliability measurements must be finite")
        object.__setattr__(self, "measurements", w)

    @property
    def m(self) -> int:
        return self.measurements.shape[0]

    @property
    def k(self) -> int:
        return self.measurements.shape[1]


def anova_components(study: ReliabilityStudy) -> tuple[float, float]:
    """Within- and between-subject mean squares of a balanced one-way layout."""
    w = study.measurements
    m, k = w.shape
    means = w.mean(axis=1)
    msw = float(((w - means[:, None]) ** 2).sum() / (m * (k - 1)))
    msb = float(k * ((means - means.mean()) ** 2).sum() / (m - 1))
    return msw, msb


def estimate_nuisance(study: ReliabilityStudy, alpha1=None) -> ErrorModelParams:
    """Moment estimates of ``(alpha0, sigma_x2, sigma_u2)`` from a reliability study.

    When the study records ``z`` and ``alpha1`` is not supplied, ``alpha0`` and
    ``alpha1`` come from least squares of the subject means on ``z`` and the
    between-subject mean square is taken from the residuals.
    """
    w = study.measurements
    m, k = w.shape
    msw, msb = anova_components(study)
    means = w.mean(axis=1)
    a1: tuple = ()
    if study.z is not None and alpha1 is None:
        zd = np.column_stack([np.ones(m), np.asarray(study.z, dtype=float).reshape(m, -1)])
        coef, *_ = np.linalg.lstsq(zd, means, rcond=None)
        resid = means - zd @ coef
        a0 = float(coef[0])
        a1 = tuple(coef[1:])
        msb = float(k * (resid**2).sum() / (m - zd.shape[1]))
    elif alpha1 is not None:
        a1 = tuple(np.atleast_1d(alpha1))
        a0 = float(np.mean(means - np.asarray(study.z).reshape(m, -1) @ np.asarray(a1)))
    else:
        a0 = float(means.mean())
    sigma_x2 = (msb - msw) / k
    floor = 1e-8 * max(msw, np.finfo(float).tiny)
    if sigma_x2 <= floor:
        warnings.warn("between-subject variance not above within-subject variance; "
                      "sigma_x2 truncated at a small positive floor", RuntimeWarning, stacklevel=2)
        sigma_x2 = floor
    return ErrorModelParams(alpha0=a0, alpha1=a1, sigma_x2=sigma_x2, sigma_u2=msw)


def read_reliability_csv(path) -> ReliabilityStudy:
    """Read a long-format reliability file with columns ``subject_id, replicate, w``."""
    rows: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"subject_id", "replicate", "w"}
        if reader.fieldnames is None or not need.issubset(reader.fieldnames):
            raise ThresholdCoxError(f"{path}: header must contain subject_id, replicate, w")
        for line_no, rec in enumerate(reader, start=2):
            try:
                value = float(rec["w"])
            except (TypeError, ValueError):
                raise ThresholdCoxError(f"{path}:{line_no}: w is not a number") from None
            rows.setdefault(rec["subject_id"], {})[rec["replicate"]] = value
    if not rows:
        raise ThresholdCoxError(f"{path}: no data rows")
    sizes = {len(v) for v in rows.values()}
    if len(sizes) != 1:
        raise ThresholdCoxError(f"{path}: every subject needs the same number of replicates")
    ids = list(rows)
    data = np.array([[rows[s][r] for r in sorted(rows[s])] for s in ids])
    return ReliabilityStudy(data, subject_ids=np.array(ids, dtype=object))
