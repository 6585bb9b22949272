"""Euler-Maruyama particle baseline for Fokker-Planck-form PDEs.

Simulates dX = b_t(X) dt + sqrt(2 D) dW on a fixed time grid and snapshots
the ensemble at requested times (first grid point at or after each request).
"""

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, ShapeError
from .reference import spd_matrix_fn

BLOWUP_LIMIT = 1e8


@dataclass
class ParticleEnsemble:
    positions: np.ndarray      # (n, d)
    time: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.positions)):
            raise DivergenceError("ensemble contains non-finite positions",
                                  t=self.time)


def _noise_factor(diffusion, d):
    """sqrt(2 D) as a matrix for scalar / diagonal / full D."""
    D = np.asarray(diffusion, dtype=np.float64)
    if D.ndim == 0:
        return np.sqrt(2.0 * float(D)) * np.eye(d)
    if D.ndim == 1:
        return np.diag(np.sqrt(2.0 * D))
    return spd_matrix_fn(2.0 * D, "sqrt")


def em_simulate(drift, diffusion, x0, dt, total_time, rng, record_times):
    """Forward Euler-Maruyama from the (n, d) initial cloud ``x0``.

    ``drift(t, X)`` maps the ensemble to per-particle velocities; ``diffusion``
    is the Fokker-Planck D (scalar, diagonal, or matrix, constant in x).
    Returns one :class:`ParticleEnsemble` per requested time.
    """
    if dt <= 0:
        raise ShapeError("dt must be positive")
    record_times = [float(s) for s in record_times]
    if any(b < a for a, b in zip(record_times, record_times[1:])):
        raise ShapeError("record times must be sorted ascending")
    if record_times and (record_times[0] < 0 or record_times[-1] > total_time + dt):
        raise ShapeError("record times must lie in [0, total_time]")
    x = np.array(x0, dtype=np.float64)
    n, d = x.shape
    L = _noise_factor(diffusion, d)
    noisy = np.any(L != 0.0)

    n_steps = int(np.ceil(total_time / dt - 1e-12))
    out = []
    pending = list(record_times)
    t = 0.0
    while pending and pending[0] <= 1e-12:
        out.append(ParticleEnsemble(x.copy(), 0.0))
        pending.pop(0)
    scale = np.sqrt(dt)
    for k in range(n_steps):
        x = x + drift(t, x) * dt
        if noisy:
            x = x + scale * rng.standard_normal((n, d)) @ L.T
        t = (k + 1) * dt
        if np.max(np.abs(x)) > BLOWUP_LIMIT:
            raise DivergenceError(
                f"particle blow-up at step {k + 1} (t={t:.6g})", t=t)
        while pending and t >= pending[0] - 1e-12:
            out.append(ParticleEnsemble(x.copy(), t))
            pending.pop(0)
    while pending:
        out.append(ParticleEnsemble(x.copy(), t))
        pending.pop(0)
    return out
