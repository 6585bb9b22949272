"""Explicit ODE integration: fixed-step RK4 and adaptive Dormand-Prince 5(4).

States are numpy arrays of any shape; the right-hand side maps ``(t, y)`` to
an array of the same shape. ``rk4_fixed`` is written against the autodiff
operators so it can also integrate tape nodes (used by the opt-in score path
of velocity-parameterized flows). The adaptive solver is plain numpy and is
meant for frozen (non-differentiated) evaluation.

Integration backwards in time (t1 < t0) is supported by both solvers.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DivergenceError, ShapeError, StiffnessError


@dataclass
class OdeProblem:
    rhs: callable          # (t, y) -> dy/dt
    t0: float
    t1: float
    y0: object             # array-like state


@dataclass
class StepStats:
    accepted_steps: int = 0
    rejected_steps: int = 0
    rhs_evaluations: int = 0


@dataclass(frozen=True)
class IntegratorConfig:
    """How flow maps integrate their velocity fields."""

    method: str = "dopri5"
    rtol: float = 1e-4
    atol: float = 1e-4
    n_steps: int = 100     # rk4 only
    max_steps: int = 100_000


def _check_finite(y, t):
    yv = ad.value_of(y)
    if not np.all(np.isfinite(yv)):
        raise DivergenceError(f"non-finite state during integration at t={t!r}", t=t)


def rk4_fixed(problem, n_steps):
    """Classical 4th-order Runge-Kutta with uniform steps."""
    if n_steps < 1:
        raise ShapeError("n_steps must be >= 1")
    t0, t1 = float(problem.t0), float(problem.t1)
    h = (t1 - t0) / n_steps
    y = problem.y0
    t = t0
    rhs = problem.rhs
    for _ in range(n_steps):
        k1 = rhs(t, y)
        k2 = rhs(t + h / 2, ad.add(y, ad.mul(h / 2, k1)))
        k3 = rhs(t + h / 2, ad.add(y, ad.mul(h / 2, k2)))
        k4 = rhs(t + h, ad.add(y, ad.mul(h, k3)))
        incr = ad.add(ad.add(k1, ad.mul(2.0, k2)), ad.add(ad.mul(2.0, k3), k4))
        y = ad.add(y, ad.mul(h / 6.0, incr))
        t += h
        _check_finite(y, t)
    return y


# Dormand-Prince 5(4) tableau
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_ERR = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920,
                    -17253 / 339200, 22 / 525, -1 / 40])

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0
_PI_ALPHA = 0.7 / 5
_PI_BETA = 0.4 / 5


def _error_norm(err, y_old, y_new, rtol, atol):
    scale = atol + rtol * np.maximum(np.abs(y_old), np.abs(y_new))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def _initial_step(rhs, t0, y0, f0, direction, rtol, atol, stats):
    """Automatic initial step selection (Hairer-Norsett-Wanner style)."""
    scale = atol + rtol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = y0 + h0 * direction * f0
    f1 = np.asarray(rhs(t0 + h0 * direction, y1), dtype=np.float64)
    stats.rhs_evaluations += 1
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1)


def dopri5_adaptive(problem, rtol=1e-4, atol=1e-4, h0=None, max_steps=100_000):
    """Dormand-Prince 5(4) embedded pair with PI step control.

    Returns ``(final_state, StepStats)``. Error per step is held below the
    mixed tolerance ``atol + rtol * |y|`` in RMS norm.
    """
    if rtol <= 0 or atol <= 0:
        raise ShapeError("rtol and atol must be positive")
    t0, t1 = float(problem.t0), float(problem.t1)
    y = np.asarray(ad.value_of(problem.y0), dtype=np.float64).copy()
    stats = StepStats()
    if t1 == t0:
        return y, stats
    direction = 1.0 if t1 > t0 else -1.0
    span = abs(t1 - t0)
    rhs = problem.rhs

    t = t0
    f = np.asarray(rhs(t, y), dtype=np.float64)
    stats.rhs_evaluations += 1
    h = abs(h0) if h0 else _initial_step(rhs, t0, y, f, direction, rtol, atol, stats)
    h = min(h, span)
    err_prev = 1.0

    while direction * (t1 - t) > 0:
        if h < 1e-12 * span:
            raise StiffnessError(
                f"step size underflow at t={t:.6g} (h={h:.3g}); problem looks stiff")
        if stats.accepted_steps + stats.rejected_steps >= max_steps:
            raise StiffnessError(f"exceeded {max_steps} steps at t={t:.6g}")
        h = min(h, abs(t1 - t))
        hs = direction * h

        k = [f]
        for i in range(1, 7):
            yi = y + hs * sum(aij * kj for aij, kj in zip(_DP_A[i], k))
            ki = np.asarray(rhs(t + _DP_C[i] * hs, yi), dtype=np.float64)
            k.append(ki)
        stats.rhs_evaluations += 6

        y_new = y + hs * sum(b * kj for b, kj in zip(_DP_B5, k))
        _check_finite(y_new, t + hs)
        err_vec = hs * sum(e * kj for e, kj in zip(_DP_ERR, k))
        err = _error_norm(err_vec, y, y_new, rtol, atol)

        if err <= 1.0:
            t = t + hs
            y = y_new
            f = k[6]            # FSAL: stage 7 equals the derivative at (t+h, y_new)
            stats.accepted_steps += 1
            factor = _SAFETY * (err + 1e-16) ** (-_PI_ALPHA) * err_prev ** _PI_BETA
            h *= min(_MAX_FACTOR, max(_MIN_FACTOR, factor))
            err_prev = max(err, 1e-4)
        else:
            stats.rejected_steps += 1
            h *= max(_MIN_FACTOR, _SAFETY * err ** (-0.2))
    return y, stats


def integrate_with_checkpoints(problem, times, config=None):
    """States of ``problem`` at each requested time, in one forward sweep.

    ``times`` must be sorted ascending and lie between t0 and t1. Step-size
    control restarts at every checkpoint (no dense output).
    """
    config = config or IntegratorConfig()
    times = [float(s) for s in times]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ShapeError("checkpoint times must be sorted ascending")
    t0, t1 = float(problem.t0), float(problem.t1)
    lo, hi = min(t0, t1), max(t0, t1)
    if times and (times[0] < lo - 1e-12 or times[-1] > hi + 1e-12):
        raise ShapeError(f"checkpoint times must lie within [{lo}, {hi}]")

    out = []
    y = problem.y0
    t_cur = t0
    span = abs(t1 - t0)
    for t_next in times:
        if abs(t_next - t_cur) > 0:
            seg = OdeProblem(problem.rhs, t_cur, t_next, y)
            if config.method == "rk4":
                n = max(1, int(np.ceil(config.n_steps * abs(t_next - t_cur) / max(span, 1e-30))))
                y = rk4_fixed(seg, n)
            else:
                y, _ = dopri5_adaptive(seg, rtol=config.rtol, atol=config.atol,
                                       max_steps=config.max_steps)
            t_cur = t_next
        out.append(ad.value_of(y).copy() if not isinstance(y, ad.Node) else y)
    return out
