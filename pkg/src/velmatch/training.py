"""Iterative self-consistent velocity matching.

Each step freezes the current parameters, pushes a base batch through the
frozen flow at stratified times, evaluates the PDE right-hand side there
(no gradient tracking), and takes one Adam step matching the live velocity
field to those targets. This is gradient descent on the self-consistency
residual with the tractable biased estimator: only the velocity term is
differentiated, never the samples or f.

Two loss forms: ``direct`` is the plain squared mismatch; ``ibp`` uses the
integration-by-parts identity for Fokker-Planck-structured f to replace the
score term with a divergence of the velocity field (differing from the
direct loss by a theta-independent constant).
"""

import time as _time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import CapabilityError, ShapeError, TrainingError
from .nets import param_grad
from .pdes import FlowContext
from .util import rng_stream


@dataclass
class TrainConfig:
    n_train: int = 20_000
    batch: int = 256
    n_times: int = 10
    total_time: float = None          # default: rhs.total_time
    lr_init: float = 1e-3
    lr_final_fraction: float = 0.01
    adam_b1: float = 0.9
    adam_b2: float = 0.9              # lower than the usual 0.999: the biased
    adam_eps: float = 1e-8            # gradients want fast-moving statistics
    loss_kind: str = "auto"           # direct | ibp | auto
    init_penalty_weight: float = 1.0
    grad_clip: float = 10.0
    n_mean: int = 1024
    seed: int = 0
    eval_every: int = 500
    eval_samples: int = 256

    def __post_init__(self):
        if min(self.n_train, self.batch, self.n_times) < 0 or self.batch < 1 or self.n_times < 1:
            raise ShapeError("n_train, batch, n_times must be positive")
        if not (0.0 < self.lr_final_fraction <= 1.0):
            raise ShapeError("lr_final_fraction must lie in (0, 1]")
        if self.loss_kind not in ("direct", "ibp", "auto"):
            raise ShapeError(f"unknown loss kind {self.loss_kind!r}")


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    b1: float = 0.9
    b2: float = 0.9
    eps: float = 1e-8

    @classmethod
    def fresh(cls, n_params, b1, b2, eps):
        return cls(np.zeros(n_params), np.zeros(n_params), 0, b1, b2, eps)


def adam_update(state, grad, lr):
    """One Adam step with bias correction; returns the parameter delta."""
    if grad.shape != state.m.shape:
        raise ShapeError("gradient does not match optimizer state layout")
    state.step += 1
    state.m = state.b1 * state.m + (1.0 - state.b1) * grad
    state.v = state.b2 * state.v + (1.0 - state.b2) * grad * grad
    mhat = state.m / (1.0 - state.b1 ** state.step)
    vhat = state.v / (1.0 - state.b2 ** state.step)
    return -lr * mhat / (np.sqrt(vhat) + state.eps)


def cosine_lr(k, n_total, lr_init, lr_final):
    if n_total <= 0:
        return lr_init
    frac = min(max(k / n_total, 0.0), 1.0)
    return lr_final + (lr_init - lr_final) * 0.5 * (1.0 + np.cos(np.pi * frac))


def stratified_times(n_times, total_time, rng):
    """One uniform draw per stratum [(l-1)T/L, lT/L]; sorted by construction."""
    if n_times < 1 or total_time <= 0:
        raise ShapeError("need n_times >= 1 and total_time > 0")
    width = total_time / n_times
    return (np.arange(n_times) + rng.uniform(size=n_times)) * width


def resolve_loss_kind(kind, model, rhs):
    if kind == "auto":
        if not model.exact_density and rhs.fp is not None:
            return "ibp"
        return "direct"
    if kind == "ibp" and rhs.fp is None:
        raise CapabilityError(
            f"rhs {rhs.name!r} has no drift/diffusion decomposition; "
            "the integration-by-parts loss needs one")
    return kind


def _flatten_batch(y, times):
    """(B, L, d) frozen pushforward -> row-major-in-time arrays."""
    B, L, d = y.shape
    rows = np.ascontiguousarray(y.transpose(1, 0, 2).reshape(L * B, d))
    t_rows = np.repeat(np.asarray(times, dtype=np.float64), B)
    return rows, t_rows


def loss_direct(model, views, ctx, rhs, times, y):
    """Mean squared velocity mismatch at frozen flow points.

    ``y`` is the frozen pushforward (B, L, d); f is evaluated under the
    frozen context in one batched call and enters as a constant.
    """
    rows, t_rows = _flatten_batch(y, times)
    f_rows = rhs(ctx, t_rows, rows)
    v = model.velocity(t_rows, rows, views)
    diff = ad.sub(v, f_rows)
    return ad.tmean(ad.tsum(ad.mul(diff, diff), axis=-1))


def loss_ibp(model, views, ctx, rhs, times, y):
    """Velocity-matching loss with the score term integrated by parts.

    mean ||v||^2 - 2 v.b - 2 div(D^T v); equals the direct loss up to the
    theta-independent mean ||f||^2 term, so the gradients agree in
    expectation.
    """
    if rhs.fp is None:
        raise CapabilityError(f"rhs {rhs.name!r} has no decomposition for the ibp loss")
    rows, t_rows = _flatten_batch(y, times)
    B, L, d = y.shape
    b_rows = np.concatenate([rhs.fp.drift(ctx, t, y[:, l, :])
                             for l, t in enumerate(times)])
    # constant-in-x diffusion per time, expanded to a per-row weight matrix
    w_blocks = []
    for t in times:
        D = np.asarray(rhs.fp.diffusion(t), dtype=np.float64)
        if D.ndim == 0:
            D = float(D) * np.eye(d)
        elif D.ndim == 1:
            D = np.diag(D)
        w_blocks.append(np.broadcast_to(D.T[None], (B, d, d)))
    w_rows = np.concatenate(w_blocks, axis=0)

    v, tan = model.velocity_and_jacobian(t_rows, rows, views)
    # tan[:, j, i] = dv_i/dx_j; div(D^T v) = sum_ij D_ij dv_i/dx_j
    div_term = ad.tsum(ad.reshape(ad.mul(tan, w_rows), (B * L, d * d)), axis=-1)
    sq = ad.tsum(ad.mul(v, v), axis=-1)
    cross = ad.tsum(ad.mul(v, b_rows), axis=-1)
    per_row = ad.sub(sq, ad.add(ad.mul(2.0, cross), ad.mul(2.0, div_term)))
    return ad.tmean(per_row)


@dataclass
class TrainState:
    model: object
    opt: OptimizerState
    rng: np.random.Generator
    iteration: int = 0
    history: list = field(default_factory=list)


def init_state(model, cfg):
    opt = OptimizerState.fresh(model.params.size, cfg.adam_b1, cfg.adam_b2,
                               cfg.adam_eps)
    return TrainState(model=model, opt=opt, rng=rng_stream(cfg.seed, "train"))


def scvm_step(state, rhs, cfg):
    """One iteration: freeze, push forward, match velocities, Adam update."""
    model = state.model
    T = cfg.total_time if cfg.total_time is not None else rhs.total_time
    kind = resolve_loss_kind(cfg.loss_kind, model, rhs)

    frozen = model.frozen_copy()
    ctx = FlowContext(frozen, state.rng, n_mean=cfg.n_mean)
    x0 = model.base.sample(cfg.batch, state.rng)
    times = stratified_times(cfg.n_times, T, state.rng)
    y = ctx.pushforward(times, x0)

    loss_fx = loss_ibp if kind == "ibp" else loss_direct

    def objective(views):
        loss = loss_fx(model, views, ctx, rhs, times, y)
        if model.exact_inverse and cfg.init_penalty_weight > 0:
            loss = ad.add(loss, ad.mul(cfg.init_penalty_weight,
                                       model.init_penalty(x0, views)))
        return loss


    loss_holder = {}

    def objective_capture(views):
        out = objective(views)
        loss_holder["value"] = float(ad.value_of(out))
        return out

    grad = param_grad(objective_capture, model.params)
    loss_value = loss_holder["value"]

    if not np.isfinite(loss_value) or not np.all(np.isfinite(grad)):
        raise TrainingError(
            f"non-finite loss or gradient at iteration {state.iteration}",
            snapshot={"iteration": state.iteration, "times": times.tolist(),
                      "loss": loss_value,
                      "grad_finite": bool(np.all(np.isfinite(grad)))})

    gnorm = float(np.linalg.norm(grad))
    if cfg.grad_clip > 0 and gnorm > cfg.grad_clip:
        grad = grad * (cfg.grad_clip / gnorm)

    lr = cosine_lr(state.iteration, cfg.n_train, cfg.lr_init,
                   cfg.lr_init * cfg.lr_final_fraction)
    delta = adam_update(state.opt, grad, lr)
    model.params.values += delta
    state.iteration += 1
    return loss_value, {"lr": lr, "grad_norm": gnorm, "loss_kind": kind}


def self_consistency_estimate(model, rhs, n_times, n_samples, rng, n_mean=1024):
    """Monte Carlo residual of the fixed-point condition at the current flow.

    Same machinery as the direct loss with the frozen copy equal to the
    live parameters; reports (mean over everything, std across the per-time
    means).
    """
    T = rhs.total_time
    frozen = model.frozen_copy()
    ctx = FlowContext(frozen, rng, n_mean=n_mean)
    x0 = model.base.sample(n_samples, rng)
    times = stratified_times(n_times, T, rng)
    y = ctx.pushforward(times, x0)
    per_time = []
    for l, t in enumerate(times):
        f = rhs(ctx, t, y[:, l, :])
        v = ad.value_of(frozen.velocity(t, y[:, l, :]))
        per_time.append(float(np.mean(np.sum((v - f) ** 2, axis=-1))))
    per_time = np.asarray(per_time)
    return float(per_time.mean()), float(per_time.std())


def train(model, rhs, cfg, on_eval=None, checkpoint_fn=None, checkpoint_every=0):
    """Run the full loop; returns the training history rows.

    Every ``cfg.eval_every`` iterations (and at 0 and the end) a history row
    (iteration, loss, lr, self-consistency estimate, wall seconds) is
    recorded and passed to ``on_eval`` if given.
    """
    state = init_state(model, cfg)
    t_start = _time.perf_counter()
    last_loss = float("nan")
    kind = resolve_loss_kind(cfg.loss_kind, model, rhs)

    def record(loss_value):
        sc_rng = rng_stream(cfg.seed, f"sc-eval-{state.iteration}")
        sc_mean, _ = self_consistency_estimate(model, rhs, cfg.n_times,
                                               cfg.eval_samples, sc_rng,
                                               n_mean=cfg.n_mean)
        row = {"iteration": state.iteration, "loss": loss_value,
               "lr": cosine_lr(state.iteration, cfg.n_train, cfg.lr_init,
                               cfg.lr_init * cfg.lr_final_fraction),
               "self_consistency": sc_mean,
               "wall_time": _time.perf_counter() - t_start,
               "loss_kind": kind}
        state.history.append(row)
        if on_eval:
            on_eval(row)

    record(last_loss)
    for _ in range(cfg.n_train):
        last_loss, _ = scvm_step(state, rhs, cfg)
        if cfg.eval_every and state.iteration % cfg.eval_every == 0:
            record(last_loss)
        if checkpoint_fn and checkpoint_every and state.iteration % checkpoint_every == 0:
            checkpoint_fn(state)
    if not cfg.eval_every or state.iteration % cfg.eval_every:
        record(last_loss)
    if checkpoint_fn:
        checkpoint_fn(state)
    return state


# ---------------------------------------------------------------------------
# biased-gradient diagnostic


def _score_on_tape(model, t, rows_node, dim):
    """Spatial score with theta kept on the tape, via forward probes."""
    cols = []
    n = ad.value_of(rows_node).shape[0]
    for k in range(dim):
        e = np.zeros((1, dim))
        e[0, k] = 1.0
        probe = np.broadcast_to(e, (n, dim))
        lp = model.log_density(t, ad.Dual(rows_node, probe))
        cols.append(ad.reshape(lp.tangent, (n, 1)))
    return ad.concat(cols, axis=-1)


def bias_diagnostic(model, rhs, n_samples, n_times, seed, n_mean=1024):
    """Compare the iterative (biased) gradient with the full one.

    The iterative gradient freezes samples and f; the full gradient lets
    them depend on the parameters too (samples through the flow map, f
    through the score), which is tractable for exact-density flows whose
    rhs depends on the flow only through its score. Returns the two norms
    and their cosine; at a self-consistent fixed point both gradients
    vanish and the cosine is reported as None.
    """
    if not model.exact_density:
        raise CapabilityError("the bias diagnostic needs an exact-density flow")
    if rhs.fp is None or "mean" in rhs.needs:
        raise CapabilityError(
            "the full gradient is tractable only for rhs of drift-minus-score "
            "form without interaction terms")

    T = rhs.total_time
    rng = rng_stream(seed, "bias-diagnostic")
    x0 = model.base.sample(n_samples, rng)
    times = stratified_times(n_times, T, rng)

    frozen = model.frozen_copy()
    ctx = FlowContext(frozen, rng, n_mean=n_mean)
    y = ctx.pushforward(times, x0)

    g_iter = param_grad(lambda views: loss_direct(model, views, ctx, rhs, times, y),
                        model.params)

    def full_loss(views):
        total = None
        for t in times:
            rows = model.flow_map(t, x0, views)
            drift = rhs.fp.drift(ctx, t, ad.value_of(rows))
            diffusion = rhs.fp.diffusion(t)
            score = _score_on_tape(model, t, rows, model.dim)
            f = ad.sub(drift, _apply_diffusion_ops(diffusion, score))
            v = model.velocity(t, rows, views)
            diff = ad.sub(v, f)
            term = ad.tmean(ad.tsum(ad.mul(diff, diff), axis=-1))
            total = term if total is None else ad.add(total, term)
        return ad.div(total, float(len(times)))

    g_full = param_grad(full_loss, model.params)

    ni, nf = float(np.linalg.norm(g_iter)), float(np.linalg.norm(g_full))
    if ni < 1e-12 or nf < 1e-12:
        cosine = None
    else:
        cosine = float(np.dot(g_iter, g_full) / (ni * nf))
    return {"iterative_grad_norm": ni, "full_grad_estimate_norm": nf,
            "cosine": cosine}


def _apply_diffusion_ops(diffusion, vecs):
    D = np.asarray(diffusion, dtype=np.float64)
    if D.ndim == 0:
        return ad.mul(float(D), vecs)
    if D.ndim == 1:
        return ad.mul(vecs, D[None, :])
    return ad.matmul(vecs, D.T)
