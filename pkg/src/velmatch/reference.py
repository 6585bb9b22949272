"""Closed-form and semi-analytic reference solutions.

These are the ground truths the solver is judged against: the Gaussian path
of the Ornstein-Uhlenbeck gradient flow, moment ODEs for time-dependent
drift, the Barenblatt profile of the porous medium equation, and a
random-walk Metropolis-Hastings sampler for compactly supported initial
measures.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, TuningError
from .ode import OdeProblem, dopri5_adaptive


def spd_matrix_fn(A, fn):
    """exp/sqrt/inverse/log of a symmetric positive (semi)definite matrix.

    Eigendecomposition based; the result is symmetrized exactly.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {A.shape}")
    if np.max(np.abs(A - A.T)) > 1e-8:
        raise ShapeError("matrix is not symmetric")
    w, v = np.linalg.eigh(A)
    if fn == "exp":
        fw = np.exp(w)
    elif fn == "sqrt":
        if np.any(w < -1e-12):
            raise ShapeError("sqrt of a matrix with negative eigenvalues")
        fw = np.sqrt(np.maximum(w, 0.0))
    elif fn == "inverse":
        if np.any(w <= 0):
            raise ShapeError("inverse of a singular or indefinite matrix")
        fw = 1.0 / w
    elif fn == "log":
        if np.any(w <= 0):
            raise ShapeError("log of a non positive-definite matrix")
        fw = np.log(w)
    else:
        raise ShapeError(f"unknown matrix function {fn!r}")
    out = (v * fw) @ v.T
    return 0.5 * (out + out.T)


@dataclass
class GaussianPath:
    """Time-indexed Gaussian reference: mean(t) and SPD cov(t)."""

    mean: callable
    cov: callable
    provenance: str = "closed_form_ou"


def ou_solution(t, beta, gamma):
    """Mean and covariance of the OU gradient-flow Gaussian at time t.

    The flow starts at the standard Gaussian and relaxes towards
    N(beta, gamma^{-1}): mean (I - e^{-t gamma}) beta and covariance
    gamma^{-1}(I - e^{-2 t gamma}) + e^{-2 t gamma}.
    """
    beta = np.asarray(beta, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    if t < 0:
        raise ShapeError("t must be nonnegative")
    d = beta.size
    if gamma.shape != (d, d):
        raise ShapeError("gamma must be d x d")
    if np.max(np.abs(gamma - gamma.T)) > 1e-8 or np.any(np.linalg.eigvalsh(gamma) <= 0):
        raise ShapeError("gamma must be symmetric positive definite")
    e1 = spd_matrix_fn(-t * gamma, "exp")
    e2 = spd_matrix_fn(-2.0 * t * gamma, "exp")
    gamma_inv = spd_matrix_fn(gamma, "inverse")
    mean = (np.eye(d) - e1) @ beta
    cov = gamma_inv @ (np.eye(d) - e2) + e2
    return mean, 0.5 * (cov + cov.T)


def ou_path(beta, gamma):
    return GaussianPath(mean=lambda t: ou_solution(t, beta, gamma)[0],
                        cov=lambda t: ou_solution(t, beta, gamma)[1],
                        provenance="closed_form_ou")


def tdou_moments(t, gamma_t, beta_t, diffusion_t, m0, sigma0,
                 rtol=1e-8, atol=1e-8):
    """Mean and covariance of the Gaussian path under time-dependent drift.

    Integrates m' = -Gamma_t (m - beta_t), Sigma' = -Gamma_t Sigma
    - Sigma Gamma_t^T + 2 D_t from (m0, Sigma0). The covariance is
    symmetrized after integration.
    """
    m0 = np.asarray(m0, dtype=np.float64)
    sigma0 = np.asarray(sigma0, dtype=np.float64)
    d = m0.size
    if np.any(np.linalg.eigvalsh(sigma0) <= 0):
        raise ShapeError("initial covariance must be positive definite")
    if t == 0:
        return m0.copy(), sigma0.copy()

    def rhs(s, y):
        m = y[:d]
        S = y[d:].reshape(d, d)
        G = np.asarray(gamma_t(s), dtype=np.float64)
        D = np.asarray(diffusion_t(s), dtype=np.float64)
        dm = -G @ (m - np.asarray(beta_t(s), dtype=np.float64))
        dS = -G @ S - S @ G.T + 2.0 * D
        return np.concatenate([dm, dS.ravel()])

    y0 = np.concatenate([m0, sigma0.ravel()])
    y, _ = dopri5_adaptive(OdeProblem(rhs, 0.0, float(t), y0), rtol=rtol, atol=atol)
    m = y[:d]
    S = y[d:].reshape(d, d)
    return m, 0.5 * (S + S.T)


def tdou_path(gamma_t, beta_t, diffusion_t, m0, sigma0):
    def mean(t):
        return tdou_moments(t, gamma_t, beta_t, diffusion_t, m0, sigma0)[0]

    def cov(t):
        return tdou_moments(t, gamma_t, beta_t, diffusion_t, m0, sigma0)[1]

    return GaussianPath(mean=mean, cov=cov, provenance="moment_ode")


@dataclass(frozen=True)
class BarenblattProfile:
    """Self-similar compactly supported solution of d/dt p = lap(p^m).

    alpha = d / (d(m-1) + 2) and beta_coef = (m-1) alpha / (2 d m); the mass
    constant C is free. ``unit_mass`` picks C so the profile integrates
    to one (the profile is only a probability density for that C).
    """

    m: float
    d: int
    C: float
    t0: float

    def __post_init__(self):
        if self.m <= 1:
            raise ShapeError("porous medium exponent m must exceed 1")
        if self.C <= 0 or self.t0 <= 0:
            raise ShapeError("C and t0 must be positive")

    @property
    def alpha(self):
        return self.d / (self.d * (self.m - 1.0) + 2.0)

    @property
    def beta_coef(self):
        return (self.m - 1.0) * self.alpha / (2.0 * self.d * self.m)

    def x_max(self, t):
        """Support radius: the root of C - beta_coef r^2 (t+t0)^(-2a/d)."""
        return np.sqrt(self.C / self.beta_coef) * (t + self.t0) ** (self.alpha / self.d)

    @classmethod
    def unit_mass(cls, m, d, t0):
        """Profile with C solved so that the total mass is exactly one."""
        probe = cls(m, d, 1.0, t0)
        beta = probe.beta_coef
        alpha = probe.alpha

        def mass(C):
            # radial quadrature at t=0; mass is invariant in t
            s = t0 ** (-2.0 * alpha / d)
            rmax = np.sqrt(C / (beta * s))
            r = np.linspace(0.0, rmax, 20001)
            fr = t0 ** (-alpha) * np.clip(C - beta * r * r * s, 0.0, None) ** (1.0 / (m - 1.0))
            if d == 1:
                return 2.0 * np.trapezoid(fr, r)
            surface = 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0)
            return surface * np.trapezoid(fr * r ** (d - 1), r)

        lo, hi = 1e-8, 1.0
        while mass(hi) < 1.0:
            hi *= 2.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if mass(mid) < 1.0:
                lo = mid
            else:
                hi = mid
        return cls(m, d, 0.5 * (lo + hi), t0)


def barenblatt_density(profile, t, x):
    """Exact profile density at time t; zero outside the support ball."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[-1] != profile.d:
        raise ShapeError(f"points must have dim {profile.d}")
    ts = t + profile.t0
    a = profile.alpha
    inner = profile.C - profile.beta_coef * np.sum(x * x, axis=-1) * ts ** (-2.0 * a / profile.d)
    out = ts ** (-a) * np.clip(inner, 0.0, None) ** (1.0 / (profile.m - 1.0))
    return out if out.size > 1 else float(out[0])


def mh_sampler(log_density, proposal_std, n, burn_in, thinning, rng, x0=None, dim=1):
    """Gaussian random-walk Metropolis-Hastings.

    Runs ``n`` parallel chains and returns one draw per chain after
    ``burn_in`` + ``thinning`` steps each, which keeps the draws nearly
    independent while staying vectorized. Raises a tuning error if fewer
    than 1% of burn-in proposals are accepted.
    """
    if x0 is None:
        x0 = np.zeros(dim)
    x0 = np.asarray(x0, dtype=np.float64)
    dim = x0.size
    x = np.broadcast_to(x0, (n, dim)).copy()
    lp = np.asarray(log_density(x), dtype=np.float64)
    if not np.all(np.isfinite(lp)):
        raise ShapeError("chain initialized outside the support")
    accepted = 0
    proposed = 0
    total = burn_in + thinning
    for step in range(total):
        prop = x + proposal_std * rng.standard_normal((n, dim))
        lp_prop = np.asarray(log_density(prop), dtype=np.float64)
        logu = np.log(rng.uniform(size=n))
        take = logu < (lp_prop - lp)
        x[take] = prop[take]
        lp[take] = lp_prop[take]
        if step < burn_in:
            accepted += int(take.sum())
            proposed += n
            if step == burn_in - 1 and accepted < 0.01 * proposed:
                raise TuningError(
                    f"MH acceptance rate {accepted / proposed:.3%} during burn-in; "
                    "reduce proposal_std")
    return x
