"""Probability-flow models.

Two parameterizations of the flow map / velocity field pair:

* :class:`TipfModel` models the flow map directly as a stack of time-
  conditioned affine coupling layers with an analytic inverse and exact
  densities via the change-of-variable formula. The velocity field is
  recovered as the time derivative of the map along a frozen start point.
* :class:`NodeModel` models the velocity field directly as a network; the
  flow map, inverse, and log-density come from numerical integration
  (instantaneous change of variables).

Both take the scalar time through a shared feature stack: sinusoidal
features at frequencies 2^k followed by two fully connected layers, which
the coupling conditioners / velocity net consume as extra input columns.
All evaluation methods accept a scalar time or one time per row, and work
on plain arrays or tape nodes (pass ``views`` with tape leaves to build a
differentiable graph).
"""

import numpy as np

from . import autodiff as ad
from .errors import CapabilityError, ShapeError
from .nets import (MlpSpec, ParamStore, init_mlp_params, merge_layouts,
                   mlp_layout, mlp_forward_jvp, scoped_params)
from .ode import IntegratorConfig, OdeProblem, dopri5_adaptive, integrate_with_checkpoints, rk4_fixed


def _rows_of(x):
    xv = ad.value_of(x)
    if xv.ndim == 1:
        raise ShapeError("flow methods take batched points of shape (n, d)")
    return xv.shape[0]


def _unique_times(t, n):
    """Split per-row times into unique values plus a row index."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t.reshape(1, 1), np.zeros(n, dtype=np.intp)
    if t.shape != (n,):
        raise ShapeError(f"expected scalar time or ({n},) times, got {t.shape}")
    uniq, inverse = np.unique(t, return_inverse=True)
    return uniq.reshape(-1, 1), inverse.astype(np.intp)


def _time_embed_layout(e):
    return [("temb0/weight", (e, e)), ("temb0/bias", (e,)),
            ("temb1/weight", (e, e)), ("temb1/bias", (e,))]


def _init_time_embed(named, e, rng):
    named["temb0/weight"] = rng.normal(0.0, 1.0 / np.sqrt(e), size=(e, e))
    named["temb0/bias"] = np.zeros(e)
    named["temb1/weight"] = rng.normal(0.0, 1.0 / np.sqrt(e), size=(e, e))
    named["temb1/bias"] = np.zeros(e)


def _time_feats(views, tu, e, with_tangent):
    """Shared time features at unique times (u, e); optionally d/dt."""
    freqs = 2.0 ** np.arange(e // 2)
    ang = tu * freqs[None, :]
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    h = ad.affine(feats, views["temb0/weight"], views["temb0/bias"])
    if with_tangent:
        dfeats = np.concatenate([np.cos(ang) * freqs, -np.sin(ang) * freqs], axis=-1)
        th = ad.mul(ad.matmul(dfeats, views["temb0/weight"]), ad.silu_grad(h))
    h = ad.silu(h)
    h2 = ad.affine(h, views["temb1/weight"], views["temb1/bias"])
    if with_tangent:
        th2 = ad.mul(ad.matmul(th, views["temb1/weight"]), ad.silu_grad(h2))
        return ad.silu(h2), th2
    return ad.silu(h2), None


class FlowModel:
    """Shared surface of the two flow parameterizations."""

    exact_density = False
    exact_inverse = False

    def views(self):
        return self.params.views()

    def frozen_copy(self):
        """Same model with an independent snapshot of the parameters."""
        import copy

        twin = copy.copy(self)
        twin.params = self.params.copy()
        return twin

    def time_features(self, t, n, views=None, with_tangent=False):
        views = views or self.views()
        tu, rows = _unique_times(t, n)
        feats_u, dfeats_u = _time_feats(views, tu, self.time_embed_dim, with_tangent)
        feats = ad.gather_rows(feats_u, rows)
        dfeats = ad.gather_rows(dfeats_u, rows) if with_tangent else None
        return feats, dfeats

    def sample_base(self, n, rng):
        return self.base.sample(n, rng)

    def sample_path(self, times, n, rng):
        """I.i.d. flow samples at each time: array (n, len(times), d)."""
        x0 = self.base.sample(n, rng)
        out = np.empty((n, len(times), self.dim))
        for k, t in enumerate(times):
            out[:, k, :] = self.flow_map(t, x0)
        return out


# ---------------------------------------------------------------------------
# invertible coupling flow


class TipfModel(FlowModel):
    """Time-conditioned invertible pushforward (affine coupling stack).

    2*dim coupling layers; layer i rewrites coordinate i mod dim as
    ``x_j * exp(s) + r`` with scale and translation conditioner networks
    fed the time features and the complementary coordinates. Log-scales
    are bounded by ``scale_bound * tanh``.
    """

    exact_density = True
    exact_inverse = True

    def __init__(self, dim, base, params, cond_hidden, time_embed_dim,
                 scale_bound=4.0):
        self.dim = int(dim)
        self.base = base
        self.params = params
        self.cond_hidden = tuple(cond_hidden)
        self.time_embed_dim = int(time_embed_dim)
        self.scale_bound = float(scale_bound)
        self.n_layers = 2 * self.dim
        self.cond_spec = MlpSpec(self.time_embed_dim + self.dim - 1,
                                 self.cond_hidden, 1)
        self._n_body = len(self.cond_hidden) + 1

    @classmethod
    def layout(cls, dim, cond_hidden, time_embed_dim):
        cond_spec = MlpSpec(time_embed_dim + dim - 1, tuple(cond_hidden), 1)
        scopes = [("", _time_embed_layout(time_embed_dim))]
        for i in range(2 * dim):
            scopes.append((f"cpl{i:02d}/s", mlp_layout(cond_spec)))
            scopes.append((f"cpl{i:02d}/r", mlp_layout(cond_spec)))
        return merge_layouts(*scopes)

    @classmethod
    def build(cls, dim, base, rng, cond_hidden=(64, 128, 128),
              time_embed_dim=64, scale_bound=4.0):
        """Fresh model; conditioner output layers start at zero so the
        initial map is the identity at every time."""
        layout = cls.layout(dim, cond_hidden, time_embed_dim)
        cond_spec = MlpSpec(time_embed_dim + dim - 1, tuple(cond_hidden), 1)
        named = {}
        _init_time_embed(named, time_embed_dim, rng)
        for i in range(2 * dim):
            for side in ("s", "r"):
                sub = init_mlp_params(cond_spec, rng, zero_output=True)
                for name, _ in mlp_layout(cond_spec):
                    named[f"cpl{i:02d}/{side}/{name}"] = sub.view(name)
        store = ParamStore.zeros(layout)
        store = store.replace(store.flatten_named(named))
        return cls(dim, base, store, cond_hidden, time_embed_dim, scale_bound)

    # -- conditioner pair, evaluated stacked on a leading axis of size 2

    def _stacked(self, views):
        """Per-layer stacked (scale, translation) weights, built once per pass."""
        out = []
        for i in range(self.n_layers):
            layer = []
            for k in range(self._n_body):
                ws = views[f"cpl{i:02d}/s/layer{k}/weight"]
                wr = views[f"cpl{i:02d}/r/layer{k}/weight"]
                shp = ad.value_of(ws).shape
                w = ad.concat([ad.reshape(ws, (1,) + shp),
                               ad.reshape(wr, (1,) + shp)], axis=0)
                bs = views[f"cpl{i:02d}/s/layer{k}/bias"]
                br = views[f"cpl{i:02d}/r/layer{k}/bias"]
                wid = ad.value_of(bs).shape[0]
                b = ad.concat([ad.reshape(bs, (1, 1, wid)),
                               ad.reshape(br, (1, 1, wid))], axis=0)
                layer.append((w, b))
            out.append(layer)
        return out

    def _cond_pair(self, stacked_layer, inp, tin=None):
        """(s_raw, r) and optional time-direction tangents, one fused pass."""
        h, th = inp, tin
        n = _rows_of(inp)
        for k, (w, b) in enumerate(stacked_layer):
            h = ad.add(ad.matmul(h, w), b)
            if th is not None:
                th = ad.matmul(th, w)
            if k < self._n_body - 1:
                if th is not None:
                    th = ad.mul(th, ad.silu_grad(h))
                h = ad.silu(h)
        s_raw = ad.reshape(ad.gather_rows(h, [0]), (n, 1))
        r = ad.reshape(ad.gather_rows(h, [1]), (n, 1))
        if th is None:
            return s_raw, r, None, None
        ts = ad.reshape(ad.gather_rows(th, [0]), (n, 1))
        tr = ad.reshape(ad.gather_rows(th, [1]), (n, 1))
        return s_raw, r, ts, tr

    def _bounded_scale(self, s_raw, ts=None):
        th = ad.tanh(s_raw)
        s = ad.mul(self.scale_bound, th)
        if ts is None:
            return s, None
        ds = ad.mul(self.scale_bound, ad.mul(ts, ad.sub(1.0, ad.mul(th, th))))
        return s, ds

    @staticmethod
    def _comp_idx(j, d):
        return [c for c in range(d) if c != j]

    @staticmethod
    def _merge(yj, comp, j, d):
        if d == 1:
            return yj
        parts = []
        if j > 0:
            parts.append(ad.gather_cols(comp, list(range(0, j))))
        parts.append(yj)
        if j < d - 1:
            parts.append(ad.gather_cols(comp, list(range(j, d - 1))))
        return ad.concat(parts, axis=-1)

    def flow_map(self, t, x, views=None):
        """Push points forward through all coupling layers at time t."""
        views = views or self.views()
        n = _rows_of(x)
        feats, _ = self.time_features(t, n, views)
        stacked = self._stacked(views)
        h = x
        d = self.dim
        for i in range(self.n_layers):
            j = i % d
            comp = ad.gather_cols(h, self._comp_idx(j, d))
            s_raw, r, _, _ = self._cond_pair(stacked[i], ad.concat([feats, comp], axis=-1))
            s, _ = self._bounded_scale(s_raw)
            yj = ad.add(ad.mul(ad.gather_cols(h, [j]), ad.exp(s)), r)
            h = self._merge(yj, comp, j, d)
        return h

    def inverse_map(self, t, y, views=None, _stacked=None, _feats=None):
        """Analytic inverse; returns (points, log det of the inverse Jacobian)."""
        views = views or self.views()
        n = _rows_of(y)
        feats = _feats if _feats is not None else self.time_features(t, n, views)[0]
        stacked = _stacked if _stacked is not None else self._stacked(views)
        h = y
        d = self.dim
        logdet = 0.0
        for i in reversed(range(self.n_layers)):
            j = i % d
            comp = ad.gather_cols(h, self._comp_idx(j, d))
            s_raw, r, _, _ = self._cond_pair(stacked[i], ad.concat([feats, comp], axis=-1))
            s, _ = self._bounded_scale(s_raw)
            xj = ad.mul(ad.sub(ad.gather_cols(h, [j]), r), ad.exp(ad.neg(s)))
            logdet = ad.sub(logdet, ad.reshape(s, (-1,)))
            h = self._merge(xj, comp, j, d)
        return h, logdet

    def velocity(self, t, x, views=None):
        """d/ds of the flow map at s = t, holding the start point fixed."""
        views = views or self.views()
        n = _rows_of(x)
        feats, dfeats = self.time_features(t, n, views, with_tangent=True)
        stacked = self._stacked(views)
        z, _ = self.inverse_map(t, x, views, _stacked=stacked, _feats=feats)
        h, th = z, None
        d = self.dim
        zero_col = np.zeros((n, d - 1)) if d > 1 else None
        for i in range(self.n_layers):
            j = i % d
            cidx = self._comp_idx(j, d)
            comp = ad.gather_cols(h, cidx)
            tcomp = ad.gather_cols(th, cidx) if th is not None else zero_col
            inp = ad.concat([feats, comp], axis=-1)
            tin = ad.concat([dfeats, tcomp], axis=-1) if d > 1 else dfeats
            s_raw, r, ts_raw, tr = self._cond_pair(stacked[i], inp, tin)
            s, ds = self._bounded_scale(s_raw, ts_raw)
            es = ad.exp(s)
            xj = ad.gather_cols(h, [j])
            txj = ad.gather_cols(th, [j]) if th is not None else 0.0
            yj = ad.add(ad.mul(xj, es), r)
            tyj = ad.add(ad.mul(es, ad.add(ad.mul(xj, ds), txj)), tr)
            h = self._merge(yj, comp, j, d)
            th = self._merge(tyj, tcomp, j, d) if d > 1 else tyj
        return th

    def velocity_and_jacobian(self, t, x, views=None, probes=None):
        """Velocity plus directional derivatives along probe directions.

        The coupling velocity has no dedicated fused jacobian path; each
        probe is one generic forward-mode pass through :meth:`velocity`.
        """
        views = views or self.views()
        n = _rows_of(x)
        d = self.dim
        if probes is None:
            probes = np.broadcast_to(np.eye(d)[None], (n, d, d))
        probes_v = ad.value_of(probes)
        v = None
        slabs = []
        for k in range(probes_v.shape[1]):
            out = self.velocity(t, ad.Dual(x, probes_v[:, k, :]), views)
            v = out.primal if v is None else v
            slabs.append(ad.reshape(out.tangent, (n, 1, d)))
        return v, ad.concat(slabs, axis=1)

    def log_density(self, t, x, views=None):
        z, logdet = self.inverse_map(t, x, views)
        return ad.add(self.base.log_density(z), logdet)

    def score(self, t, x):
        """Exact gradient of the log-density in x (frozen parameters)."""
        x = np.asarray(x, dtype=np.float64)
        x_leaf = ad.leaf(x)
        rows = self.log_density(t, x_leaf)
        (g,) = ad.grad(ad.tsum(rows), [x_leaf])
        return g

    def init_penalty(self, x0, views=None):
        """Mean squared deviation of the time-zero map from the identity."""
        out = self.flow_map(0.0, x0, views)
        diff = ad.sub(out, np.asarray(x0, dtype=np.float64))
        return ad.tmean(ad.tsum(ad.mul(diff, diff), axis=-1))

    def to_meta(self):
        return {"model": "tipf", "dim": self.dim,
                "cond_hidden": list(self.cond_hidden),
                "time_embed_dim": self.time_embed_dim,
                "scale_bound": self.scale_bound,
                "base": self.base.to_dict()}


# ---------------------------------------------------------------------------
# velocity-field flow


class NodeModel(FlowModel):
    """Velocity-field parameterization integrated as an ODE.

    The velocity is a fully connected network of (time features, x) plus a
    positive semidefinite low-rank linear part A(t) x + c(t) with
    A = L L^T, where L(t) and c(t) are linear in the time features.
    """

    exact_density = False
    exact_inverse = False

    def __init__(self, dim, base, params, hidden, time_embed_dim, rank,
                 use_layer_norm=True, integrator=None, score_via_density=False,
                 score_steps=64):
        self.dim = int(dim)
        self.base = base
        self.params = params
        self.hidden = tuple(hidden)
        self.time_embed_dim = int(time_embed_dim)
        self.rank = int(rank)
        self.use_layer_norm = bool(use_layer_norm)
        self.integrator = integrator or IntegratorConfig()
        self.score_via_density = bool(score_via_density)
        self.score_steps = int(score_steps)
        self.net_spec = MlpSpec(self.time_embed_dim + self.dim, self.hidden,
                                self.dim, use_layer_norm=self.use_layer_norm)

    @classmethod
    def layout(cls, dim, hidden, time_embed_dim, rank, use_layer_norm=True):
        spec = MlpSpec(time_embed_dim + dim, tuple(hidden), dim,
                       use_layer_norm=use_layer_norm)
        return merge_layouts(
            ("", _time_embed_layout(time_embed_dim)),
            ("vnet", mlp_layout(spec)),
            ("skip", [("lmap/weight", (time_embed_dim, dim * rank)),
                      ("lmap/bias", (dim * rank,)),
                      ("cmap/weight", (time_embed_dim, dim)),
                      ("cmap/bias", (dim,))]),
        )

    @classmethod
    def build(cls, dim, base, rng, hidden=(256, 256, 256), time_embed_dim=64,
              rank=20, use_layer_norm=True, integrator=None,
              score_via_density=False, score_steps=64):
        """Fresh model; the net output layer and the skip maps start at zero
        so the initial velocity field vanishes identically."""
        layout = cls.layout(dim, hidden, time_embed_dim, rank, use_layer_norm)
        spec = MlpSpec(time_embed_dim + dim, tuple(hidden), dim,
                       use_layer_norm=use_layer_norm)
        named = {}
        _init_time_embed(named, time_embed_dim, rng)
        sub = init_mlp_params(spec, rng, zero_output=True)
        for name, _ in mlp_layout(spec):
            named[f"vnet/{name}"] = sub.view(name)
        store = ParamStore.zeros(layout)
        store = store.replace(store.flatten_named(named))
        return cls(dim, base, store, hidden, time_embed_dim, rank,
                   use_layer_norm, integrator, score_via_density, score_steps)

    def _skip(self, views, feats, n):
        L = ad.reshape(ad.affine(feats, views["skip/lmap/weight"], views["skip/lmap/bias"]),
                       (n, self.dim, self.rank))
        c = ad.affine(feats, views["skip/cmap/weight"], views["skip/cmap/bias"])
        return L, c

    def velocity(self, t, x, views=None):
        """Network velocity field at (t, x); x is (n, dim)."""
        views = views or self.views()
        n = _rows_of(x)
        feats, _ = self.time_features(t, n, views)
        out = mlp_forward_jvp(self.net_spec, scoped_params(views, "vnet"),
                              ad.concat([feats, x], axis=-1), None)[0]
        L, c = self._skip(views, feats, n)
        lx = ad.matmul(ad.swap_last(L), ad.reshape(x, (n, self.dim, 1)))
        ax = ad.reshape(ad.matmul(L, lx), (n, self.dim))
        return ad.add(out, ad.add(ax, c))

    def velocity_and_jacobian(self, t, x, views=None, probes=None):
        """Velocity plus directional derivatives along probe directions.

        ``probes`` is (n, p, dim); defaults to the full coordinate basis so
        the result tangent (n, p, dim) carries the spatial Jacobian rows
        d v / d x_k in slot k.
        """
        views = views or self.views()
        n = _rows_of(x)
        d = self.dim
        if probes is None:
            probes = np.broadcast_to(np.eye(d)[None], (n, d, d))
        p = ad.value_of(probes).shape[1]
        feats, _ = self.time_features(t, n, views)
        inp = ad.concat([feats, x], axis=-1)
        tin = ad.concat([np.zeros((n, p, self.time_embed_dim)), probes], axis=-1)
        out, tan = mlp_forward_jvp(self.net_spec, scoped_params(views, "vnet"), inp, tin)
        L, c = self._skip(views, feats, n)
        lx = ad.matmul(ad.swap_last(L), ad.reshape(x, (n, d, 1)))
        ax = ad.reshape(ad.matmul(L, lx), (n, d))
        v = ad.add(out, ad.add(ax, c))
        # skip tangent: probes (n,p,d) -> (L L^T u) per probe
        tl = ad.matmul(probes, L)                       # (n, p, rank)
        tskip = ad.matmul(tl, ad.swap_last(L))          # (n, p, dim)
        return v, ad.add(tan, tskip)

    def divergence(self, t, x, views=None):
        """Row-wise divergence of the velocity field, shape (n,)."""
        _, tan = self.velocity_and_jacobian(t, x, views)
        return _diag_trace(tan, _rows_of(x), self.dim)

    def flow_map(self, t, x, views=None):
        if views is not None:
            raise CapabilityError("flow_map integrates frozen parameters only")
        x = np.asarray(x, dtype=np.float64)
        t = float(t)
        if t == 0.0:
            return x.copy()
        prob = OdeProblem(lambda s, y: ad.value_of(self.velocity(s, y)), 0.0, t, x)
        y, _ = dopri5_adaptive(prob, rtol=self.integrator.rtol,
                               atol=self.integrator.atol,
                               max_steps=self.integrator.max_steps)
        return y

    def sample_path(self, times, n, rng):
        x0 = self.base.sample(n, rng)
        prob = OdeProblem(lambda s, y: ad.value_of(self.velocity(s, y)),
                          0.0, float(max(times)) if len(times) else 0.0, x0)
        states = integrate_with_checkpoints(prob, list(times), self.integrator)
        out = np.empty((n, len(times), self.dim))
        for k, st in enumerate(states):
            out[:, k, :] = st
        return out

    def _aug_rhs(self, s, aug, views):
        n = _rows_of(aug)
        d = self.dim
        x = ad.gather_cols(aug, list(range(d)))
        v, tan = self.velocity_and_jacobian(s, x, views)
        div = _diag_trace(tan, n, d)
        return ad.concat([v, ad.reshape(div, (n, 1))], axis=-1)

    def inverse_map(self, t, y, views=None):
        """Backward integration along -v; also accumulates the log det of
        the inverse Jacobian via the divergence."""
        if views is not None:
            raise CapabilityError("inverse_map integrates frozen parameters only")
        y = np.asarray(y, dtype=np.float64)
        n, d = y.shape
        aug0 = np.concatenate([y, np.zeros((n, 1))], axis=-1)
        if float(t) == 0.0:
            return y.copy(), np.zeros(n)
        prob = OdeProblem(lambda s, a: ad.value_of(self._aug_rhs(s, a, self.views())),
                          float(t), 0.0, aug0)
        out, _ = dopri5_adaptive(prob, rtol=self.integrator.rtol,
                                 atol=self.integrator.atol,
                                 max_steps=self.integrator.max_steps)
        # d(logdet)/ds = div v integrated from t down to 0
        return out[:, :d], out[:, d]

    def log_density(self, t, x):
        z, logdet_inv = self.inverse_map(t, x)
        return ad.value_of(self.base.log_density(z)) + logdet_inv

    def score(self, t, x):
        """Spatial gradient of the log-density.

        Off by default: it integrates the full augmented system on the tape.
        Configure ``score_via_density=True`` to allow it, or use the
        integration-by-parts loss, which avoids scores altogether.
        """
        if not self.score_via_density:
            raise CapabilityError(
                "velocity-field flows have no cheap score; enable "
                "score_via_density or use the integration-by-parts loss")
        x = np.asarray(x, dtype=np.float64)
        n, d = x.shape
        if float(t) == 0.0:
            leaf = ad.leaf(x)
            (g,) = ad.grad(ad.tsum(self.base.log_density(leaf)), [leaf])
            return g
        views = self.views()
        leaf = ad.leaf(x)
        aug0 = ad.concat([leaf, np.zeros((n, 1))], axis=-1)
        out = rk4_fixed(OdeProblem(lambda s, a: self._aug_rhs(s, a, views),
                                   float(t), 0.0, aug0), self.score_steps)
        z = ad.gather_cols(out, list(range(d)))
        logdet = ad.reshape(ad.gather_cols(out, [d]), (-1,))
        lp = ad.add(self.base.log_density(z), logdet)
        (g,) = ad.grad(ad.tsum(lp), [leaf])
        return g

    def to_meta(self):
        return {"model": "node", "dim": self.dim, "hidden": list(self.hidden),
                "time_embed_dim": self.time_embed_dim, "rank": self.rank,
                "use_layer_norm": self.use_layer_norm,
                "integrator": {"method": self.integrator.method,
                               "rtol": self.integrator.rtol,
                               "atol": self.integrator.atol,
                               "n_steps": self.integrator.n_steps},
                "score_via_density": self.score_via_density,
                "score_steps": self.score_steps,
                "base": self.base.to_dict()}


def _diag_trace(tan, n, d):
    """Sum of tan[:, k, k] over k for an (n, d, d) probe tangent."""
    mask = np.eye(d).reshape(1, d, d)
    return ad.tsum(ad.reshape(ad.mul(tan, mask), (n, d * d)), axis=-1)
