"""The PDE right-hand sides f_t(x; mu_t) the solver can match.

Each :class:`PdeRhs` declares what it needs from the frozen flow (score,
density, interaction mean) and, when it has Fokker-Planck structure
``f = b_t - D_t grad log p_t``, exposes that decomposition so the trainer
can use the integration-by-parts loss instead of evaluating scores.

All evaluation happens under a :class:`FlowContext`: a frozen snapshot of
the flow parameters with no gradient tracking, matching the iterative
scheme where f is always evaluated at the previous iterate.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import CapabilityError, ShapeError
from .ode import OdeProblem, integrate_with_checkpoints


class FlowContext:
    """Read-only accessors over a flow with frozen parameters.

    Constructed once per training step from a parameter snapshot; everything
    evaluates in plain numpy (the stop-gradient of the iterative scheme).
    The interaction mean is a Monte Carlo average over ``n_mean`` fresh flow
    samples, cached per time within the context's lifetime.
    """

    def __init__(self, model, rng, n_mean=1024):
        self.model = model
        self.rng = rng
        self.n_mean = n_mean
        self._mean_cache = {}

    def score(self, t, x):
        return np.asarray(self.model.score(t, x))

    def log_density(self, t, x):
        return np.asarray(ad.value_of(self.model.log_density(t, x)))

    def density(self, t, x):
        return np.exp(self.log_density(t, x))

    def samples(self, t, n):
        return self.model.sample_path([t], n, self.rng)[:, 0, :]

    def mean(self, t):
        key = float(t)
        if key not in self._mean_cache:
            self._mean_cache[key] = self.samples(t, self.n_mean).mean(axis=0)
        return self._mean_cache[key]

    def pushforward(self, times, x0):
        """Flow images of x0 at each sorted time: (n, len(times), d)."""
        times = list(times)
        if any(b < a for a, b in zip(times, times[1:])):
            raise ShapeError("pushforward times must be sorted ascending")
        n, d = np.asarray(x0).shape
        out = np.empty((n, len(times), d))
        if self.model.exact_inverse:
            # one batched pass over all (time, point) pairs
            L = len(times)
            rows = np.tile(np.asarray(x0, dtype=np.float64), (L, 1))
            t_rows = np.repeat(np.asarray(times, dtype=np.float64), n)
            pushed = self.model.flow_map(t_rows, rows)
            return np.ascontiguousarray(pushed.reshape(L, n, d).transpose(1, 0, 2))
        rhs = lambda s, y: ad.value_of(self.model.velocity(s, y))
        t1 = times[-1] if times else 0.0
        states = integrate_with_checkpoints(OdeProblem(rhs, 0.0, t1, np.asarray(x0)),
                                            times, self.model.integrator)
        for k, st in enumerate(states):
            out[:, k, :] = st
        return out


def apply_diffusion(diffusion, vecs):
    """D applied to row vectors, with D a scalar, a diagonal, or a matrix."""
    D = np.asarray(diffusion, dtype=np.float64)
    if D.ndim == 0:
        return float(D) * vecs
    if D.ndim == 1:
        return vecs * D[None, :]
    return vecs @ D.T


@dataclass
class FpDecomposition:
    """Drift and diffusion of f = b_t(x) - D_t grad log p_t(x).

    ``drift(ctx, t, X)`` returns (n, d); ``diffusion(t)`` returns a scalar,
    a diagonal, or a full constant matrix (no x dependence).
    """

    drift: callable
    diffusion: callable


def blockwise_t(fn):
    """Lift a scalar-time function (ctx, t, x) -> rows to per-row times."""

    def wrapped(ctx, t, x):
        t_arr = np.asarray(t, dtype=np.float64)
        if t_arr.ndim == 0:
            return fn(ctx, float(t_arr), x)
        out = np.empty_like(np.asarray(x, dtype=np.float64))
        uniq, inv = np.unique(t_arr, return_inverse=True)
        for i, tt in enumerate(uniq):
            mask = inv == i
            out[mask] = fn(ctx, float(tt), x[mask])
        return out

    return wrapped


@dataclass
class PdeRhs:
    """One solvable PDE: f plus its declared flow dependencies.

    Calls accept a scalar time or one time per row.
    """

    name: str
    dim: int
    total_time: float
    initial: object
    needs: frozenset = field(default_factory=frozenset)
    fp: FpDecomposition = None
    _f: callable = None

    def __call__(self, ctx, t, x):
        x = np.asarray(x, dtype=np.float64)
        if "score" in self.needs and self.fp is not None and self._f is None:
            b = self.fp.drift(ctx, t, x)
            s = ctx.score(t, x)
            t_arr = np.asarray(t, dtype=np.float64)
            if t_arr.ndim == 0:
                return b - apply_diffusion(self.fp.diffusion(float(t_arr)), s)
            diffused = blockwise_t(
                lambda ctx_, tt, rows: apply_diffusion(self.fp.diffusion(tt), rows))
            return b - diffused(ctx, t_arr, s)
        return self._f(ctx, t, x)


# ---------------------------------------------------------------------------
# mixture-of-Gaussians target (KL gradient flow)


@dataclass(frozen=True)
class MogTarget:
    """Mixture of equally weighted unit-covariance Gaussians."""

    means: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "means", np.atleast_2d(np.asarray(self.means, float)))

    @property
    def dim(self):
        return self.means.shape[1]

    def _log_components(self, x):
        x = np.atleast_2d(x)
        d2 = np.sum((x[:, None, :] - self.means[None, :, :]) ** 2, axis=-1)
        return -0.5 * d2 - 0.5 * self.dim * np.log(2 * np.pi)


def mog_log_density(target, x):
    """Log of the mixture density, max-shifted for stability."""
    lc = target._log_components(x) - np.log(target.means.shape[0])
    m = lc.max(axis=-1, keepdims=True)
    return (m + np.log(np.sum(np.exp(lc - m), axis=-1, keepdims=True)))[:, 0]


def mog_score(target, x):
    """Gradient of the mixture log-density (softmax-weighted pulls)."""
    x = np.atleast_2d(x)
    lc = target._log_components(x)
    lc = lc - lc.max(axis=-1, keepdims=True)
    w = np.exp(lc)
    w /= w.sum(axis=-1, keepdims=True)
    return np.einsum("nk,nkd->nd", w, target.means[None, :, :] - x[:, None, :])


def kl_flow_rhs(name, target_score, dim, total_time, initial):
    """Wasserstein gradient flow of KL to a target with known score.

    f = grad log p*(x) - grad log p_t(x), i.e. b = target score and D = I.
    """
    fp = FpDecomposition(drift=lambda ctx, t, x: target_score(x),
                         diffusion=lambda t: 1.0)
    return PdeRhs(name=name, dim=dim, total_time=total_time, initial=initial,
                  needs=frozenset({"score"}), fp=fp)


def mog_rhs(target, total_time, initial):
    return kl_flow_rhs("mog", lambda x: mog_score(target, x), target.dim,
                       total_time, initial)


def gaussian_kl_rhs(beta, gamma, total_time, initial):
    """KL flow towards N(beta, gamma^{-1}) (the OU gradient flow)."""
    beta = np.asarray(beta, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    score = lambda x: (beta - np.atleast_2d(x)) @ gamma.T
    return kl_flow_rhs("ou", score, beta.size, total_time, initial)


# ---------------------------------------------------------------------------
# porous medium


def pme_rhs(m, dim, total_time, initial):
    """f = -m p^{m-1} grad log p (diffusion-only porous medium flow).

    Needs exact densities and scores; no Fokker-Planck decomposition with
    x-independent diffusion exists, so the direct loss is required.
    """

    def f(ctx, t, x):
        lp = ctx.log_density(t, x)
        s = ctx.score(t, x)
        return -m * np.exp((m - 1.0) * lp)[:, None] * s

    return PdeRhs(name="pme", dim=dim, total_time=total_time, initial=initial,
                  needs=frozenset({"score", "density"}), _f=f)


# ---------------------------------------------------------------------------
# time-dependent trap


def tdou_rhs(gamma_t, beta_t, diffusion, dim, total_time, initial):
    """Attraction towards a moving trap with constant diffusion.

    f = Gamma_t (beta_t - x) - D grad log p_t.
    """
    D = np.asarray(diffusion, dtype=np.float64)

    def drift_single(ctx, t, x):
        G = np.asarray(gamma_t(t), dtype=np.float64)
        return (np.asarray(beta_t(t), dtype=np.float64)[None, :] - x) @ G.T

    fp = FpDecomposition(drift=blockwise_t(drift_single), diffusion=lambda t: D)
    return PdeRhs(name="tdou", dim=dim, total_time=total_time, initial=initial,
                  needs=frozenset({"score"}), fp=fp)


def birds_rhs(gamma_t, beta_t, alpha_t, diffusion, dim, total_time, initial,
              n_mean=1024):
    """Moving trap plus a mean-interaction term.

    f = Gamma_t (beta_t - x) + alpha_t (x - E[mu_t]) - D grad log p_t; the
    population mean joins the drift in the decomposition and is estimated
    with Monte Carlo samples from the frozen flow.
    """
    D = np.asarray(diffusion, dtype=np.float64)

    def drift_single(ctx, t, x):
        G = np.asarray(gamma_t(t), dtype=np.float64)
        pull = (np.asarray(beta_t(t), dtype=np.float64)[None, :] - x) @ G.T
        return pull + alpha_t(t) * (x - ctx.mean(t)[None, :])

    fp = FpDecomposition(drift=blockwise_t(drift_single), diffusion=lambda t: D)
    return PdeRhs(name="birds", dim=dim, total_time=total_time, initial=initial,
                  needs=frozenset({"score", "mean"}), fp=fp)


# ---------------------------------------------------------------------------
# obstacle flow


def segment_projection(p, a, b):
    """Closest point on the segment [a, b]; p may be (2,) or (n, 2)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.array_equal(a, b):
        raise ShapeError("segment endpoints must differ")
    p2 = np.atleast_2d(np.asarray(p, dtype=np.float64))
    ab = b - a
    s = np.clip((p2 - a) @ ab / (ab @ ab), 0.0, 1.0)
    out = a + s[:, None] * ab
    return out if np.asarray(p).ndim > 1 else out[0]


def obstacle_rhs(segments, q_sink, dim, total_time, initial,
                 repulsion_scale=20.0, kernel_var=0.04):
    """Sink attraction plus Gaussian-bump repulsion from line obstacles.

    b(x) = (q_sink - x) + scale * sum_i unit(x - proj_i(x)) *
    pdf_N(0, kernel_var)(dist_i(x)); D = I. Points exactly on a segment get
    zero repulsion from it.
    """
    q = np.asarray(q_sink, dtype=np.float64)
    segs = [(np.asarray(a, float), np.asarray(b, float)) for a, b in segments]
    norm = 1.0 / np.sqrt(2.0 * np.pi * kernel_var)

    def drift(ctx, t, x):
        x = np.atleast_2d(x)
        out = q[None, :] - x
        for a, b in segs:
            proj = segment_projection(x, a, b)
            diff = x - proj
            dist = np.linalg.norm(diff, axis=-1)
            bump = repulsion_scale * norm * np.exp(-0.5 * dist ** 2 / kernel_var)
            # on the segment the direction is undefined: no repulsion there
            on_seg = dist[:, None] <= 1e-12
            with np.errstate(invalid="ignore", divide="ignore"):
                unit = np.where(on_seg, 0.0, diff / np.where(on_seg, 1.0, dist[:, None]))
            out = out + bump[:, None] * unit
        return out

    fp = FpDecomposition(drift=drift, diffusion=lambda t: 1.0)
    return PdeRhs(name="obstacles", dim=dim, total_time=total_time,
                  initial=initial, needs=frozenset({"score"}), fp=fp)
