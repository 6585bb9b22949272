"""Evaluation metrics between distributions, reported as mean +- std.

Every metric draws fresh i.i.d. samples per repeat from seeded streams and
reports statistics over exactly ``repeats`` independent estimates.
Distributions enter as duck-typed views with ``sample(n, rng)`` and, where
the metric needs densities, ``log_density(x)``; for sample-only methods a
kernel density estimate stands in for the density.
"""

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .errors import ShapeError
from .reference import spd_matrix_fn
from .training import self_consistency_estimate

W2_EXACT_LIMIT = 1024


@dataclass
class MetricReport:
    """Per-time, per-metric records with a stable CSV schema."""

    records: list = field(default_factory=list)

    COLUMNS = ("t", "metric", "mean", "std", "n_repeats", "n_samples")

    def add(self, t, metric, mean, std, n_repeats, n_samples):
        if std < 0 or n_repeats < 1:
            raise ShapeError("std must be nonnegative and n_repeats positive")
        self.records.append({"t": float(t), "metric": str(metric),
                             "mean": float(mean), "std": float(std),
                             "n_repeats": int(n_repeats),
                             "n_samples": int(n_samples)})

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            w.writeheader()
            for r in self.records:
                w.writerow(r)


class DistView:
    """Minimal sampler + log-density pair used by the divergence metrics."""

    def __init__(self, sample, log_density=None, name=""):
        self.sample = sample
        self._log_density = log_density
        self.name = name

    @property
    def has_density(self):
        return self._log_density is not None

    def log_density(self, x):
        if self._log_density is None:
            raise ShapeError(f"distribution {self.name!r} has no density access")
        return np.asarray(ad.value_of(self._log_density(x)))


def _check_support(lp, producer, evaluator):
    if np.any(np.isneginf(lp)) or np.any(np.isnan(lp)):
        raise ShapeError(
            f"density of {evaluator!r} vanishes at samples from {producer!r}: "
            "supports do not match")


def _repeat_stats(values):
    values = np.asarray(values, dtype=np.float64)
    return float(values.mean()), float(values.std())


def sym_kl(rho1, rho2, n, repeats, rng):
    """Symmetric Kullback-Leibler divergence, Monte Carlo per repeat.

    Negative repeat estimates (possible at finite sample size) are replaced
    by their absolute value.
    """
    ests = []
    for _ in range(repeats):
        x1 = rho1.sample(n, rng)
        x2 = rho2.sample(n, rng)
        lp11 = rho1.log_density(x1)
        lp21 = rho2.log_density(x1)
        _check_support(lp21, rho1.name, rho2.name)
        lp22 = rho2.log_density(x2)
        lp12 = rho1.log_density(x2)
        _check_support(lp12, rho2.name, rho1.name)
        est = float(np.mean(lp11 - lp21) + np.mean(lp22 - lp12))
        ests.append(abs(est))
    return _repeat_stats(ests)


def f_div(rho1, rho2, n, repeats, rng):
    """E_{X ~ rho2} (log rho1(X) - log rho2(X))^2 / 2: nonnegative samples."""
    ests = []
    for _ in range(repeats):
        x2 = rho2.sample(n, rng)
        lp1 = rho1.log_density(x2)
        _check_support(lp1, rho2.name, rho1.name)
        lp2 = rho2.log_density(x2)
        ests.append(float(np.mean((lp1 - lp2) ** 2 / 2.0)))
    return _repeat_stats(ests)


def sym_f_div(rho1, rho2, n, repeats, rng):
    ests = []
    for _ in range(repeats):
        x2 = rho2.sample(n, rng)
        lp1 = rho1.log_density(x2)
        _check_support(lp1, rho2.name, rho1.name)
        a = float(np.mean((lp1 - rho2.log_density(x2)) ** 2 / 2.0))
        x1 = rho1.sample(n, rng)
        lp2 = rho2.log_density(x1)
        _check_support(lp2, rho1.name, rho2.name)
        b = float(np.mean((rho1.log_density(x1) - lp2) ** 2 / 2.0))
        ests.append(a + b)
    return _repeat_stats(ests)


def w2_empirical(samples1, samples2):
    """Exact empirical Wasserstein-2 distance via optimal assignment."""
    s1 = np.atleast_2d(np.asarray(samples1, dtype=np.float64))
    s2 = np.atleast_2d(np.asarray(samples2, dtype=np.float64))
    if s1.shape != s2.shape:
        raise ShapeError("sample sets must have equal shape")
    n = s1.shape[0]
    if n > W2_EXACT_LIMIT:
        raise ShapeError(
            f"exact assignment is bounded at n={W2_EXACT_LIMIT}; subsample first")
    cost = np.sum((s1[:, None, :] - s2[None, :, :]) ** 2, axis=-1)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].sum() / n))


def bures_wasserstein(samples1, samples2):
    """Closed-form Wasserstein-2 between Gaussians fitted to the samples."""
    s1 = np.atleast_2d(np.asarray(samples1, dtype=np.float64))
    s2 = np.atleast_2d(np.asarray(samples2, dtype=np.float64))
    m1, m2 = s1.mean(axis=0), s2.mean(axis=0)
    c1 = _fitted_cov(s1)
    c2 = _fitted_cov(s2)
    r2 = spd_matrix_fn(c2, "sqrt")
    cross = spd_matrix_fn(r2 @ c1 @ r2, "sqrt")
    val = float(np.sum((m1 - m2) ** 2) + np.trace(c1 + c2 - 2.0 * cross))
    return float(np.sqrt(max(val, 0.0)))


def _fitted_cov(s):
    n, d = s.shape
    if n <= d:
        raise ShapeError("need more samples than dimensions to fit a covariance")
    c = np.cov(s.T).reshape(d, d)
    if np.min(np.linalg.eigvalsh(c)) <= 0:
        warnings.warn("singular fitted covariance; adding 1e-8 ridge")
        c = c + 1e-8 * np.eye(d)
    return c


def tv_compact(p, q, bounds, n, rng):
    """Total variation (1/2 integral |p - q|) on a box by uniform sampling."""
    lo = np.asarray(bounds[0], dtype=np.float64).ravel()
    hi = np.asarray(bounds[1], dtype=np.float64).ravel()
    if np.any(hi <= lo):
        raise ShapeError("box bounds must satisfy hi > lo")
    vol = float(np.prod(hi - lo))
    x = lo + rng.uniform(size=(n, lo.size)) * (hi - lo)
    diff = np.abs(np.asarray(p(x)).ravel() - np.asarray(q(x)).ravel())
    return float(vol * diff.mean() / 2.0)


def kde_log_density(samples, x):
    """Gaussian kernel density estimate with Scott's bandwidth rule."""
    s = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n, d = s.shape
    if n < 2:
        raise ShapeError("need at least two samples for a density estimate")
    cov = np.cov(s.T).reshape(d, d) * n ** (-2.0 / (d + 4))
    if np.min(np.linalg.eigvalsh(cov)) <= 0:
        warnings.warn("degenerate sample covariance in KDE; adding 1e-8 ridge")
        cov = cov + 1e-8 * np.eye(d)
    prec = np.linalg.inv(cov)
    _, logdet = np.linalg.slogdet(cov)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    diff = x[:, None, :] - s[None, :, :]
    quad = np.einsum("qnd,de,qne->qn", diff, prec, diff)
    log_kernel = -0.5 * quad - 0.5 * (d * np.log(2 * np.pi) + logdet)
    m = log_kernel.max(axis=1, keepdims=True)
    out = (m[:, 0] + np.log(np.mean(np.exp(log_kernel - m), axis=1)))
    return out if out.size > 1 else float(out[0])


def kde_view(samples, rng_sampler=None, name="kde"):
    """Density view over a particle cloud (resamples with replacement)."""
    s = np.atleast_2d(np.asarray(samples, dtype=np.float64))

    def sample(n, rng):
        return s[rng.integers(0, s.shape[0], size=n)]

    return DistView(sample=sample, log_density=lambda x: kde_log_density(s, x),
                    name=name)


def self_consistency(model, rhs, n_times, n_samples, rng, n_mean=1024):
    """Eq-residual of the flow against its own frozen copy; see trainer."""
    frozen = model.frozen_copy()
    if not frozen.exact_density and hasattr(frozen, "score_via_density"):
        frozen.score_via_density = True
    return self_consistency_estimate(frozen, rhs, n_times, n_samples, rng,
                                     n_mean=n_mean)
