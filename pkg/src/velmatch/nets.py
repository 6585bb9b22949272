"""Parameter storage and the fully connected network used everywhere.

Networks are plain functions of (spec, params, t, x). Parameters live in a
single flat float64 vector (:class:`ParamStore`) with named views, which keeps
the optimizer, gradient flattening, and checkpointing trivial.

The time input, when present, is lifted to sinusoidal features with
frequencies 2^k and passed through two fully connected layers before being
concatenated with the spatial input.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ShapeError


class ParamStore:
    """Flat float64 parameter vector with named, non-overlapping views."""

    __slots__ = ("values", "layout", "_offsets")

    def __init__(self, values, layout):
        self.layout = tuple((str(n), tuple(int(d) for d in shape)) for n, shape in layout)
        self.values = np.ascontiguousarray(values, dtype=np.float64).ravel()
        offsets = {}
        pos = 0
        for name, shape in self.layout:
            size = int(np.prod(shape)) if shape else 1
            if name in offsets:
                raise ShapeError(f"duplicate parameter name {name!r}")
            offsets[name] = (pos, pos + size, shape)
            pos += size
        if pos != self.values.size:
            raise ShapeError(
                f"layout covers {pos} values but store holds {self.values.size}")
        self._offsets = offsets

    @classmethod
    def zeros(cls, layout):
        size = sum(int(np.prod(s)) if s else 1 for _, s in layout)
        return cls(np.zeros(size), layout)

    @property
    def size(self):
        return self.values.size

    def view(self, name):
        lo, hi, shape = self._offsets[name]
        return self.values[lo:hi].reshape(shape)

    def views(self):
        return {name: self.view(name) for name, _ in self.layout}

    def copy(self):
        return ParamStore(self.values.copy(), self.layout)

    def replace(self, new_values):
        return ParamStore(new_values, self.layout)

    def flatten_named(self, named):
        """Pack a name -> array mapping into a flat vector matching the layout."""
        flat = np.zeros(self.values.size)
        for name, (lo, hi, shape) in self._offsets.items():
            if name in named:
                arr = np.asarray(named[name], dtype=np.float64)
                if arr.shape != shape:
                    raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
                flat[lo:hi] = arr.ravel()
        return flat


def merge_layouts(*scoped):
    """Combine (prefix, layout) pairs into one layout with prefixed names."""
    out = []
    for prefix, layout in scoped:
        for name, shape in layout:
            out.append((f"{prefix}/{name}" if prefix else name, shape))
    return tuple(out)


def scoped_params(params, prefix):
    """Sub-view of a name -> array mapping under ``prefix/``."""
    cut = len(prefix) + 1
    return {name[cut:]: arr for name, arr in params.items() if name.startswith(prefix + "/")}


@dataclass(frozen=True)
class MlpSpec:
    """Shape of one fully connected network.

    ``time_embed_dim`` = 0 means the network takes no time input; otherwise it
    must be even (sin/cos pairs) and also sets the width of the two embedding
    layers.
    """

    input_dim: int
    hidden_sizes: tuple
    output_dim: int
    activation: str = "silu"
    use_layer_norm: bool = False
    time_embed_dim: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.input_dim <= 0 or self.output_dim <= 0:
            raise ShapeError("input_dim and output_dim must be positive")
        if any(h <= 0 for h in self.hidden_sizes):
            raise ShapeError("hidden_sizes must be positive")
        if self.activation not in ("silu", "celu"):
            raise ShapeError(f"unknown activation {self.activation!r}")
        if self.time_embed_dim < 0 or self.time_embed_dim % 2:
            raise ShapeError("time_embed_dim must be a nonnegative even integer")


def mlp_layout(spec):
    """Ordered (name, shape) parameter layout for :func:`mlp_apply`."""
    layout = []
    e = spec.time_embed_dim
    if e:
        layout += [("temb0/weight", (e, e)), ("temb0/bias", (e,)),
                   ("temb1/weight", (e, e)), ("temb1/bias", (e,))]
    widths = [spec.input_dim + e] + list(spec.hidden_sizes) + [spec.output_dim]
    for i in range(len(widths) - 1):
        layout += [(f"layer{i}/weight", (widths[i], widths[i + 1])),
                   (f"layer{i}/bias", (widths[i + 1],))]
        if spec.use_layer_norm and i < len(widths) - 2:
            layout += [(f"ln{i}/scale", (widths[i + 1],)),
                       (f"ln{i}/offset", (widths[i + 1],))]
    return tuple(layout)


def init_mlp_params(spec, rng, zero_output=True):
    """Draw initial parameters: lecun-normal weights, zero biases.

    With ``zero_output`` the final linear layer starts at exactly zero so the
    network output is zero at initialization regardless of input.
    """
    named = {}
    n_layers = len(spec.hidden_sizes) + 1
    for name, shape in mlp_layout(spec):
        if name.endswith("/weight"):
            fan_in = shape[0]
            named[name] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
        elif name.endswith("/scale"):
            named[name] = np.ones(shape)
        else:
            named[name] = np.zeros(shape)
    if zero_output:
        named[f"layer{n_layers - 1}/weight"] = np.zeros_like(
            named[f"layer{n_layers - 1}/weight"])
    store = ParamStore.zeros(mlp_layout(spec))
    return store.replace(store.flatten_named(named))


_ACT = {"silu": ad.silu, "celu": ad.celu}

LAYER_NORM_EPS = 1e-6


def _layer_norm(h, scale, offset):
    m = ad.tmean(h, axis=-1, keepdims=True)
    c = ad.sub(h, m)
    v = ad.tmean(ad.mul(c, c), axis=-1, keepdims=True)
    return ad.add(ad.mul(ad.div(c, ad.sqrt(ad.add(v, LAYER_NORM_EPS))), scale), offset)


def sinusoidal_features(t, dim):
    """(sin, cos) pairs of t at frequencies 2^k, k = 0 .. dim/2 - 1.

    ``t`` may be a scalar or an (n, 1) column; output is (rows, dim).
    """
    freqs = 2.0 ** np.arange(dim // 2)
    tcol = ad.reshape(t, (-1, 1))
    ang = ad.mul(tcol, freqs[None, :])
    return ad.concat([ad.sin(ang), ad.cos(ang)], axis=-1)


def time_features(spec, params, t, n_rows):
    """Embedded time input broadcast to ``n_rows`` rows."""
    e = spec.time_embed_dim
    feats = sinusoidal_features(t, e)
    act = _ACT[spec.activation]
    h = act(ad.affine(feats, params["temb0/weight"], params["temb0/bias"]))
    h = act(ad.affine(h, params["temb1/weight"], params["temb1/bias"]))
    if ad.value_of(h).shape[0] != n_rows:
        h = ad.add(h, np.zeros((n_rows, 1)))
    return h


def mlp_apply(spec, params, t, x):
    """Evaluate the network at time ``t`` (may be None) and input ``x``.

    ``x`` is a single point ``(input_dim,)`` or a batch ``(n, input_dim)``;
    the output has the matching shape. ``params`` maps layout names to
    arrays, tape nodes, or duals.
    """
    xv = ad.value_of(x)
    single = xv.ndim == 1
    if xv.shape[-1] != spec.input_dim:
        raise ShapeError(f"input has dim {xv.shape[-1]}, spec wants {spec.input_dim}")
    h = ad.reshape(x, (1, -1)) if single else x
    n = 1 if single else xv.shape[0]

    if spec.time_embed_dim:
        if t is None:
            raise ShapeError("spec has a time input but t was not given")
        h = ad.concat([time_features(spec, params, t, n), h], axis=-1)

    act = _ACT[spec.activation]
    n_layers = len(spec.hidden_sizes) + 1
    for i in range(n_layers):
        h = ad.affine(h, params[f"layer{i}/weight"], params[f"layer{i}/bias"])
        if i < n_layers - 1:
            if spec.use_layer_norm:
                h = _layer_norm(h, params[f"ln{i}/scale"], params[f"ln{i}/offset"])
            h = act(h)
    if single:
        h = ad.reshape(h, (-1,))
    return h


def mlp_forward_jvp(spec, params, x, x_tan):
    """Primal output and directional derivative(s) of the net in one pass.

    The tangent pass reuses the primal activations, so p probe directions
    cost about p extra matrix products rather than p full re-evaluations.

    ``x`` is (n, input_dim); ``x_tan`` is one direction (n, input_dim), a
    stack of probes (n, p, input_dim), or None. Only silu networks without
    their own time input are supported (time enters as input features).
    Returns ``(out, out_tan)`` with ``out_tan`` shaped like ``x_tan``.
    """
    if spec.time_embed_dim:
        raise ShapeError("mlp_forward_jvp expects time passed as input features")
    if spec.activation != "silu":
        raise ShapeError("mlp_forward_jvp supports only the silu activation")
    h, th = x, x_tan
    probes = th is not None and ad.value_of(th).ndim == 3
    n_probes = ad.value_of(th).shape[1] if probes else 1
    if probes:
        # probe directions ride along as extra rows so every product is one
        # large 2-d matmul instead of a stack of small batched ones
        th = ad.reshape(th, (-1, ad.value_of(th).shape[-1]))

    def per_probe(arr):
        # lift an (n, k) primal-derived factor against (n*p, k) tang据 rows
        if not probes:
            return arr
        k = ad.value_of(arr).shape[-1]
        lifted = ad.reshape(arr, (-1, 1, k))
        return lifted

    def tan_3d(tangent, k):
        return ad.reshape(tangent, (-1, n_probes, k))

    def tan_2d(tangent, k):
        return ad.reshape(tangent, (-1, k))

    n_layers = len(spec.hidden_sizes) + 1
    for i in range(n_layers):
        w = params[f"layer{i}/weight"]
        h2 = ad.affine(h, w, params[f"layer{i}/bias"])
        th = None if th is None else ad.matmul(th, w)
        h = h2
        if i == n_layers - 1:
            break
        if spec.use_layer_norm:
            scale = params[f"ln{i}/scale"]
            m = ad.tmean(h, axis=-1, keepdims=True)
            c = ad.sub(h, m)
            v = ad.tmean(ad.mul(c, c), axis=-1, keepdims=True)
            inv = ad.div(1.0, ad.sqrt(ad.add(v, LAYER_NORM_EPS)))
            normed = ad.mul(c, inv)
            if th is not None:
                dc = ad.sub(th, ad.tmean(th, axis=-1, keepdims=True))
                dv = ad.mul(2.0, ad.tmean(ad.mul(per_probe(c), dc), axis=-1, keepdims=True))
                dinv = ad.mul(-0.5, ad.mul(ad.mul(per_probe(inv), ad.mul(per_probe(inv), per_probe(inv))), dv))
                th = ad.mul(ad.add(ad.mul(dc, per_probe(inv)), ad.mul(per_probe(c), dinv)), scale)
            h = ad.add(ad.mul(normed, scale), params[f"ln{i}/offset"])
        if th is not None:
            th = ad.mul(th, per_probe(ad.silu_grad(h)))
        h = ad.silu(h)
    return h, th


def param_grad(fn, store):
    """Exact gradient of ``fn(params)`` as a flat vector in store layout.

    ``fn`` receives a name -> tape-leaf mapping and must return a scalar
    built from autodiff operations.
    """
    leaves = {name: ad.leaf(store.view(name)) for name, _ in store.layout}
    out = fn(leaves)
    grads = ad.grad(out, [leaves[name] for name, _ in store.layout])
    return np.concatenate([g.ravel() for g in grads]) if grads else np.zeros(0)
