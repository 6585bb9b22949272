"""Initial measures a probability flow can start from.

Each measure exposes i.i.d. sampling, a log-density that works on plain
arrays and on tape nodes (so flows can differentiate through it), and where
available a closed-form score.
"""

import numpy as np

from . import autodiff as ad
from .errors import ShapeError
from .reference import BarenblattProfile, barenblatt_density, mh_sampler

LOG_2PI = float(np.log(2.0 * np.pi))


class GaussianMeasure:
    kind = "gaussian"

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=np.float64).ravel()
        d = self.mean.size
        cov = np.asarray(cov, dtype=np.float64)
        if cov.ndim == 0:
            cov = float(cov) * np.eye(d)
        elif cov.ndim == 1:
            cov = np.diag(cov)
        if cov.shape != (d, d):
            raise ShapeError(f"covariance must be {d}x{d}")
        self.cov = 0.5 * (cov + cov.T)
        self.dim = d
        self._chol = np.linalg.cholesky(self.cov)
        self._prec = np.linalg.inv(self.cov)
        sign, logdet = np.linalg.slogdet(self.cov)
        if sign <= 0:
            raise ShapeError("covariance must be positive definite")
        self._log_norm = -0.5 * (d * LOG_2PI + logdet)

    def sample(self, n, rng):
        return self.mean + rng.standard_normal((n, self.dim)) @ self._chol.T

    def log_density(self, x):
        diff = ad.sub(x, self.mean)
        quad = ad.tsum(ad.mul(ad.matmul(diff, self._prec), diff), axis=-1)
        return ad.add(ad.mul(-0.5, quad), self._log_norm)

    def score(self, x):
        return -(np.asarray(x) - self.mean) @ self._prec

    def to_dict(self):
        return {"kind": self.kind, "mean": self.mean.tolist(), "cov": self.cov.tolist()}


class BarenblattMeasure:
    """Compactly supported porous-medium profile at its starting time."""

    kind = "barenblatt"

    def __init__(self, profile, burn_in=1000, thinning=10, proposal_frac=0.1):
        self.profile = profile
        self.dim = profile.d
        self.burn_in = burn_in
        self.thinning = thinning
        self.proposal_std = proposal_frac * profile.x_max(0.0)
        s = profile.t0 ** (-2.0 * profile.alpha / profile.d)
        self._sx = profile.beta_coef * s
        self._log_pref = -profile.alpha * np.log(profile.t0)

    def sample(self, n, rng):
        return mh_sampler(self.log_density, self.proposal_std, n,
                          self.burn_in, self.thinning, rng, dim=self.dim)

    def log_density(self, x):
        inner = ad.sub(self.profile.C, ad.mul(self._sx, ad.tsum(ad.mul(x, x), axis=-1)))
        mask = ad.value_of(inner) > 0.0
        safe = ad.where(mask, inner, 1.0)
        lp = ad.add(ad.mul(1.0 / (self.profile.m - 1.0), ad.log(safe)), self._log_pref)
        return ad.where(mask, lp, -np.inf)

    def score(self, x):
        x = np.asarray(x, dtype=np.float64)
        inner = self.profile.C - self._sx * np.sum(x * x, axis=-1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = -2.0 * self._sx * x / ((self.profile.m - 1.0) * inner)
        return np.where(inner > 0, out, 0.0)

    def density(self, x):
        return barenblatt_density(self.profile, 0.0, x)

    def to_dict(self):
        p = self.profile
        return {"kind": self.kind, "m": p.m, "d": p.d, "C": p.C, "t0": p.t0}


class CustomMeasure:
    kind = "custom"

    def __init__(self, dim, sampler, log_density, score=None):
        self.dim = dim
        self._sampler = sampler
        self._log_density = log_density
        self._score = score

    def sample(self, n, rng):
        return self._sampler(n, rng)

    def log_density(self, x):
        return self._log_density(x)

    def score(self, x):
        if self._score is None:
            raise ShapeError("custom measure has no score")
        return self._score(x)

    def to_dict(self):
        raise ShapeError("custom measures cannot be serialized")


def measure_from_dict(data):
    kind = data["kind"]
    if kind == "gaussian":
        return GaussianMeasure(np.array(data["mean"]), np.array(data["cov"]))
    if kind == "barenblatt":
        profile = BarenblattProfile(data["m"], data["d"], data["C"], data["t0"])
        return BarenblattMeasure(profile)
    raise ShapeError(f"cannot rebuild measure of kind {kind!r}")
