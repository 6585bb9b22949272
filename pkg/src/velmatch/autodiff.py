"""Minimal differentiation engine: a reverse-mode tape plus forward-mode duals.

All math runs in 64-bit floats on numpy arrays. Two wrapper types drive the
dispatch in every operator below:

* ``Node`` records an operation on the tape. Calling :func:`grad` on a scalar
  ``Node`` walks the tape backwards and accumulates exact vector-Jacobian
  products for the requested leaves.
* ``Dual`` carries a ``(primal, tangent)`` pair for forward-mode directional
  derivatives. Tangent rules are written in terms of these same operators, so
  a tangent may itself be a ``Node``: reverse over forward compositions (for
  example the parameter gradient of a divergence) fall out for free.

A tangent of ``None`` is a structural zero; operators skip the corresponding
terms. Operators accept any mix of numpy values, ``Node`` and ``Dual`` and
return plain numpy when no wrapper is involved, so the same function source
serves evaluation, tape recording, and tangent propagation.

Every primitive here is smooth except ``celu`` (once differentiable; its
second derivative raises :class:`UnsupportedPrimitiveError`) and ``where``
(differentiated branchwise).
"""

import numpy as np

from .errors import ShapeError, UnsupportedPrimitiveError


def _f64(x):
    return np.asarray(x, dtype=np.float64)


def _expit(x):
    # 1/(1+exp(-x)) is value-correct over all float64 (exp overflow -> sigma = 0);
    # written as an in-place chain: one allocation, three passes
    with np.errstate(over="ignore"):
        out = np.array(x, dtype=np.float64)    # owned copy, stays an array
        np.negative(out, out=out)
        np.exp(out, out=out)
        out += 1.0
        np.reciprocal(out, out=out)
        return out


class Node:
    """One recorded value on the tape."""

    __slots__ = ("value", "parents", "vjps")

    def __init__(self, value, parents=(), vjps=()):
        self.value = _f64(value)
        self.parents = parents
        self.vjps = vjps

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, parents={len(self.parents)})"


class Dual:
    """Forward-mode pair. ``tangent is None`` means an exact zero tangent."""

    __slots__ = ("primal", "tangent")

    def __init__(self, primal, tangent):
        self.primal = primal
        self.tangent = tangent

    def __repr__(self):
        return f"Dual({self.primal!r}, {self.tangent!r})"


def leaf(value):
    """A fresh differentiable tape leaf."""
    return Node(value)


def value_of(x):
    """Strip wrappers down to the underlying numpy value."""
    while isinstance(x, Dual):
        x = x.primal
    if isinstance(x, Node):
        return x.value
    return _f64(x)


def _split(x):
    if isinstance(x, Dual):
        return x.primal, x.tangent
    return x, None


def _is_dual(*args):
    return any(isinstance(a, Dual) for a in args)


def _is_node(*args):
    return any(isinstance(a, Node) for a in args)


def _unbroadcast(g, shape):
    """Sum ``g`` back down to ``shape`` (adjoint of numpy broadcasting)."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _record(value, args_and_vjps):
    parents = tuple(a for a, _ in args_and_vjps if isinstance(a, Node))
    vjps = tuple(v for a, v in args_and_vjps if isinstance(a, Node))
    return Node(value, parents, vjps)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    if _is_dual(a, b):
        pa, ta = _split(a)
        pb, tb = _split(b)
        p = add(pa, pb)
        if ta is None:
            t = tb
        elif tb is None:
            t = ta
        else:
            t = add(ta, tb)
        return Dual(p, t)
    if _is_node(a, b):
        va, vb = value_of(a), value_of(b)
        out = va + vb
        return _record(out, [
            (a, lambda g: _unbroadcast(g, va.shape)),
            (b, lambda g: _unbroadcast(g, vb.shape)),
        ])
    return a + b


def neg(a):
    if isinstance(a, Dual):
        p, t = _split(a)
        return Dual(neg(p), None if t is None else neg(t))
    if isinstance(a, Node):
        return _record(-a.value, [(a, lambda g: -g)])
    return -a


def sub(a, b):
    return add(a, neg(b))


def mul(a, b):
    if _is_dual(a, b):
        pa, ta = _split(a)
        pb, tb = _split(b)
        p = mul(pa, pb)
        t = None
        if ta is not None:
            t = mul(ta, pb)
        if tb is not None:
            t2 = mul(pa, tb)
            t = t2 if t is None else add(t, t2)
        return Dual(p, t)
    if _is_node(a, b):
        va, vb = value_of(a), value_of(b)
        out = va * vb
        return _record(out, [
            (a, lambda g: _unbroadcast(g * vb, va.shape)),
            (b, lambda g: _unbroadcast(g * va, vb.shape)),
        ])
    return a * b


def div(a, b):
    if _is_dual(a, b):
        pa, ta = _split(a)
        pb, tb = _split(b)
        p = div(pa, pb)
        t = None
        if ta is not None:
            t = div(ta, pb)
        if tb is not None:
            t2 = neg(div(mul(pa, tb), mul(pb, pb)))
            t = t2 if t is None else add(t, t2)
        return Dual(p, t)
    if _is_node(a, b):
        va, vb = value_of(a), value_of(b)
        out = va / vb
        return _record(out, [
            (a, lambda g: _unbroadcast(g / vb, va.shape)),
            (b, lambda g: _unbroadcast(-g * va / (vb * vb), vb.shape)),
        ])
    return a / b


def matmul(a, b):
    if _is_dual(a, b):
        pa, ta = _split(a)
        pb, tb = _split(b)
        p = matmul(pa, pb)
        t = None
        if ta is not None:
            t = matmul(ta, pb)
        if tb is not None:
            t2 = matmul(pa, tb)
            t = t2 if t is None else add(t, t2)
        return Dual(p, t)
    if _is_node(a, b):
        va, vb = value_of(a), value_of(b)
        out = np.matmul(va, vb)
        return _record(out, [
            (a, lambda g: _unbroadcast(np.matmul(g, np.swapaxes(vb, -1, -2)), va.shape)),
            (b, lambda g: _unbroadcast(np.matmul(np.swapaxes(va, -1, -2), g), vb.shape)),
        ])
    return np.matmul(a, b)


# ---------------------------------------------------------------------------
# shape manipulation


def tsum(a, axis=None, keepdims=False):
    if isinstance(a, Dual):
        p, t = _split(a)
        return Dual(tsum(p, axis, keepdims),
                    None if t is None else tsum(t, axis, keepdims))
    if isinstance(a, Node):
        va = a.value
        out = va.sum(axis=axis, keepdims=keepdims)

        def vjp(g, va=va, axis=axis, keepdims=keepdims):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, va.shape)

        return _record(out, [(a, vjp)])
    return np.sum(a, axis=axis, keepdims=keepdims)


def tmean(a, axis=None, keepdims=False):
    va = value_of(a)
    n = va.size if axis is None else np.prod([va.shape[i] for i in np.atleast_1d(axis)])
    return div(tsum(a, axis, keepdims), float(n))


def reshape(a, shape):
    if isinstance(a, Dual):
        p, t = _split(a)
        return Dual(reshape(p, shape), None if t is None else reshape(t, shape))
    if isinstance(a, Node):
        va = a.value
        return _record(va.reshape(shape), [(a, lambda g: np.asarray(g).reshape(va.shape))])
    return np.reshape(a, shape)


def swap_last(a):
    """Transpose the last two axes."""
    if isinstance(a, Dual):
        p, t = _split(a)
        return Dual(swap_last(p), None if t is None else swap_last(t))
    if isinstance(a, Node):
        return _record(np.swapaxes(a.value, -1, -2),
                       [(a, lambda g: np.swapaxes(g, -1, -2))])
    return np.swapaxes(a, -1, -2)


def concat(parts, axis=-1):
    if any(isinstance(p, Dual) for p in parts):
        primals, tangents = [], []
        for p in parts:
            pp, tt = _split(p)
            primals.append(pp)
            tangents.append(tt)
        if all(t is None for t in tangents):
            tan = None
        else:
            tangents = [np.zeros_like(value_of(p)) if t is None else t
                        for p, t in zip(primals, tangents)]
            tan = concat(tangents, axis)
        return Dual(concat(primals, axis), tan)
    if any(isinstance(p, Node) for p in parts):
        values = [value_of(p) for p in parts]
        out = np.concatenate(values, axis=axis)
        sizes = [v.shape[axis] for v in values]
        splits = np.cumsum(sizes)[:-1]

        def make_vjp(i):
            return lambda g: np.split(np.asarray(g), splits, axis=axis)[i]

        return _record(out, [(p, make_vjp(i)) for i, p in enumerate(parts)])
    return np.concatenate(parts, axis=axis)


def gather_rows(a, idx):
    """Select rows ``a[idx]`` along the first axis (repeats allowed)."""
    idx = np.asarray(idx, dtype=np.intp)
    if isinstance(a, Dual):
        p, t = _split(a)
        return Dual(gather_rows(p, idx), None if t is None else gather_rows(t, idx))
    if isinstance(a, Node):
        va = a.value
        out = va[idx]

        def vjp(g, shape=va.shape, idx=idx):
            z = np.zeros(shape)
            np.add.at(z, idx, np.asarray(g))
            return z

        return _record(out, [(a, vjp)])
    return np.asarray(a)[idx]


def gather_cols(a, idx):
    """Select columns ``a[..., idx]`` along the last axis."""
    idx = np.asarray(idx, dtype=np.intp)
    if isinstance(a, Dual):
        p, t = _split(a)
        return Dual(gather_cols(p, idx), None if t is None else gather_cols(t, idx))
    if isinstance(a, Node):
        va = a.value
        out = va[..., idx]

        def vjp(g, shape=va.shape, idx=idx):
            z = np.zeros(shape)
            if idx.size:
                g = np.asarray(g)
                zf = z.reshape(-1, shape[-1])
                gf = g.reshape(-1, idx.size)
                np.add.at(zf, (np.arange(zf.shape[0])[:, None], idx[None, :]), gf)
            return z

        return _record(out, [(a, vjp)])
    return np.asarray(a)[..., idx]


# ---------------------------------------------------------------------------
# elementwise transcendentals


def exp(a):
    if isinstance(a, Dual):
        p, t = _split(a)
        ep = exp(p)
        return Dual(ep, None if t is None else mul(t, ep))
    if isinstance(a, Node):
        out = np.exp(a.value)
        return _record(out, [(a, lambda g: g * out)])
    return np.exp(a)


def log(a):
    if isinstance(a, Dual):
        p, t = _split(a)
        return Dual(log(p), None if t is None else div(t, p))
    if isinstance(a, Node):
        va = a.value
        return _record(np.log(va), [(a, lambda g: g / va)])
    return np.log(a)


def sqrt(a):
    if isinstance(a, Dual):
        p, t = _split(a)
        r = sqrt(p)
        return Dual(r, None if t is None else div(t, mul(2.0, r)))
    if isinstance(a, Node):
        out = np.sqrt(a.value)
        return _record(out, [(a, lambda g: g / (2.0 * out))])
    return np.sqrt(a)


def sin(a):
    if isinstance(a, Dual):
        p, t = _split(a)
        return Dual(sin(p), None if t is None else mul(t, cos(p)))
    if isinstance(a, Node):
        va = a.value
        return _record(np.sin(va), [(a, lambda g: g * np.cos(va))])
    return np.sin(a)


def cos(a):
    if isinstance(a, Dual):
        p, t = _split(a)
        return Dual(cos(p), None if t is None else neg(mul(t, sin(p))))
    if isinstance(a, Node):
        va = a.value
        return _record(np.cos(va), [(a, lambda g: -g * np.sin(va))])
    return np.cos(a)


def tanh(a):
    if isinstance(a, Dual):
        p, t = _split(a)
        th = tanh(p)
        return Dual(th, None if t is None else mul(t, sub(1.0, mul(th, th))))
    if isinstance(a, Node):
        out = np.tanh(a.value)
        return _record(out, [(a, lambda g: g * (1.0 - out * out))])
    return np.tanh(a)


def sigmoid(a):
    if isinstance(a, Dual):
        p, t = _split(a)
        s = sigmoid(p)
        return Dual(s, None if t is None else mul(t, mul(s, sub(1.0, s))))
    if isinstance(a, Node):
        out = _expit(a.value)
        return _record(out, [(a, lambda g: g * out * (1.0 - out))])
    return _expit(a)


def _silu_d1(x, s):
    # s * (1 + x * (1 - s)), one allocation
    out = np.subtract(1.0, s)
    out *= x
    out += 1.0
    out *= s
    return out


def _silu_d2(x, s):
    # s * (1 - s) * (2 + x * (1 - 2 s)), two allocations
    out = np.multiply(s, -2.0)
    out += 1.0
    out *= x
    out += 2.0
    tmp = np.subtract(1.0, s)
    tmp *= s
    out *= tmp
    return out


def _silu_d3(x, s):
    return s * (1.0 - s) * ((1.0 - 2.0 * s) * (3.0 + x * (1.0 - 2.0 * s))
                            - 2.0 * x * s * (1.0 - s))


def silu(a):
    """Smooth sigmoid-weighted linear unit, x * sigmoid(x)."""
    if isinstance(a, Dual):
        p, t = _split(a)
        return Dual(silu(p), None if t is None else mul(t, silu_grad(p)))
    if isinstance(a, Node):
        va = a.value
        s = _expit(va)

        def vjp(g):
            d = _silu_d1(va, s)
            d *= g
            return d

        return _record(va * s, [(a, vjp)])
    return a * _expit(a)


def silu_grad(a):
    """First derivative of silu (primitive, twice differentiable itself)."""
    if isinstance(a, Dual):
        p, t = _split(a)
        return Dual(silu_grad(p), None if t is None else mul(t, silu_grad2(p)))
    if isinstance(a, Node):
        va = a.value
        s = _expit(va)

        def vjp(g):
            d = _silu_d2(va, s)
            d *= g
            return d

        return _record(_silu_d1(va, s), [(a, vjp)])
    return _silu_d1(a, _expit(a))


def silu_grad2(a):
    """Second derivative of silu."""
    if isinstance(a, Dual):
        raise UnsupportedPrimitiveError(
            "fourth derivative of silu is not implemented")
    if isinstance(a, Node):
        va = a.value
        s = _expit(va)
        return _record(_silu_d2(va, s), [(a, lambda g: g * _silu_d3(va, s))])
    return _silu_d2(a, _expit(a))


def affine(x, w, b):
    """Fused x @ w + b. One tape node instead of two on the hot path."""
    if _is_dual(x, w, b):
        px, tx = _split(x)
        pw, tw = _split(w)
        pb, tb = _split(b)
        p = affine(px, pw, pb)
        t = None
        if tx is not None:
            t = matmul(tx, pw)
        if tw is not None:
            t2 = matmul(px, tw)
            t = t2 if t is None else add(t, t2)
        if tb is not None:
            t = tb if t is None else add(t, tb)
        return Dual(p, t)
    if _is_node(x, w, b):
        vx, vw, vb = value_of(x), value_of(w), value_of(b)
        out = np.matmul(vx, vw) + vb
        return _record(out, [
            (x, lambda g: _unbroadcast(np.matmul(g, vw.T), vx.shape)),
            (w, lambda g: _unbroadcast(np.matmul(np.swapaxes(vx, -1, -2), g), vw.shape)),
            (b, lambda g: _unbroadcast(g, vb.shape)),
        ])
    return np.matmul(x, w) + b


def celu_grad(a):
    """First derivative of celu. Not differentiable itself."""

    def _raise(_):
        raise UnsupportedPrimitiveError(
            "second derivative of celu is not available; use the silu activation "
            "for losses that need divergence or time derivatives")

    if isinstance(a, Dual):
        _raise(None)
    if isinstance(a, Node):
        va = a.value
        out = np.where(va > 0, 1.0, np.exp(va))
        return _record(out, [(a, _raise)])
    return np.where(a > 0, 1.0, np.exp(a))


def celu(a):
    """Continuously differentiable ELU (alpha=1). Only once differentiable."""
    if isinstance(a, Dual):
        p, t = _split(a)
        return Dual(celu(p), None if t is None else mul(t, celu_grad(p)))
    if isinstance(a, Node):
        va = a.value
        out = np.where(va > 0, va, np.expm1(va))
        return _record(out, [(a, lambda g: g * np.where(va > 0, 1.0, np.exp(va)))])
    a = np.asarray(a)
    return np.where(a > 0, a, np.expm1(a))


def where(cond, a, b):
    """Branchwise selection; ``cond`` is plain data and never differentiated."""
    cond = np.asarray(value_of(cond), dtype=bool)
    if _is_dual(a, b):
        pa, ta = _split(a)
        pb, tb = _split(b)
        p = where(cond, pa, pb)
        if ta is None and tb is None:
            t = None
        else:
            za = np.zeros_like(value_of(pa)) if ta is None else ta
            zb = np.zeros_like(value_of(pb)) if tb is None else tb
            t = where(cond, za, zb)
        return Dual(p, t)
    if _is_node(a, b):
        va, vb = value_of(a), value_of(b)
        out = np.where(cond, va, vb)
        return _record(out, [
            (a, lambda g: _unbroadcast(np.where(cond, g, 0.0), va.shape)),
            (b, lambda g: _unbroadcast(np.where(cond, 0.0, g), vb.shape)),
        ])
    return np.where(cond, a, b)


def stop_gradient(a):
    """Treat ``a`` as a constant for both tape and tangent propagation."""
    if isinstance(a, Dual):
        return stop_gradient(a.primal)
    if isinstance(a, Node):
        return a.value
    return a


# ---------------------------------------------------------------------------
# differentiation entry points


def _toposort(root):
    seen = set()
    order = []
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(root, leaves):
    """Gradients of a scalar tape node with respect to the given leaves.

    Returns one array per leaf (zeros for leaves the output does not reach).
    """
    if not isinstance(root, Node):
        # output does not depend on any tape leaf
        return [np.zeros_like(value_of(l.value if isinstance(l, Node) else l))
                for l in leaves]
    if np.asarray(root.value).size != 1:
        raise ShapeError(f"grad needs a scalar output, got shape {root.value.shape}")
    order = _toposort(root)
    grads = {id(root): np.ones_like(root.value)}
    keep = {id(l) for l in leaves}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            prev = grads.get(id(parent))
            grads[id(parent)] = contrib if prev is None else prev + contrib
        if id(node) not in keep:
            del grads[id(node)]
    return [np.asarray(grads.get(id(l), np.zeros_like(l.value)), dtype=np.float64)
            for l in leaves]


def input_grad(fn, x):
    """Exact gradient of scalar-valued ``fn`` with respect to the vector ``x``."""
    x_leaf = leaf(x)
    out = fn(x_leaf)
    return grad(out, [x_leaf])[0]


def time_partial(fn, t, x):
    """Exact partial derivative of ``fn(t, x)`` in the scalar ``t``.

    One forward-mode pass; the result has the shape of ``fn``'s output.
    """
    td = Dual(_f64(t), _f64(1.0))
    out = fn(td, x)
    if isinstance(out, Dual):
        if out.tangent is None:
            return np.zeros_like(value_of(out.primal))
        return value_of(out.tangent)
    return np.zeros_like(value_of(out))


def _tangent_or_zero(out):
    if isinstance(out, Dual):
        if out.tangent is None:
            return np.zeros_like(value_of(out.primal)), value_of(out.primal)
        return out.tangent, out.primal
    return np.zeros_like(value_of(out)), out


def divergence_exact(field, x, dim):
    """Exact trace of the Jacobian of ``field`` at ``x``.

    Runs one directional-derivative pass per coordinate. When ``field``
    closes over tape nodes the result is itself a tape node, so the
    divergence can appear inside a loss that is then differentiated.
    """
    xv = value_of(x)
    if xv.shape != (dim,):
        raise ShapeError(f"expected point of shape ({dim},), got {xv.shape}")
    total = 0.0
    for k in range(dim):
        e = np.zeros(dim)
        e[k] = 1.0
        out = field(Dual(x, e))
        tan, primal = _tangent_or_zero(out)
        if value_of(primal).shape != (dim,):
            raise ShapeError(
                f"field must map ({dim},) to ({dim},), got output shape "
                f"{value_of(primal).shape}")
        total = add(total, _pick(tan, k))
    return total


def _pick(vec, k):
    """Component k of a length-d vector (tape-aware)."""
    return reshape(gather_cols(reshape(vec, (1, -1)), [k]), ())


def divergence_batch(field, X):
    """Row-wise divergence of a batched field ``(n, d) -> (n, d)``.

    Returns shape ``(n,)``. Same contract as :func:`divergence_exact`,
    vectorized over rows with one tangent pass per coordinate.
    """
    Xv = value_of(X)
    n, d = Xv.shape
    rows = None
    for k in range(d):
        e = np.zeros((1, d))
        e[0, k] = 1.0
        tangent = np.broadcast_to(e, (n, d))
        out = field(Dual(X, tangent))
        tan, _ = _tangent_or_zero(out)
        comp = reshape(gather_cols(tan, [k]), (-1,))
        rows = comp if rows is None else add(rows, comp)
    return rows


def jacobian_weighted_batch(field, X, weights):
    """Row-wise sum_ij  w_ij * d(field_i)/d(x_j)  for a constant matrix w.

    Generalizes :func:`divergence_batch` (w = identity). Used for the
    divergence of a constant-matrix-weighted field without forming the
    product field explicitly.
    """
    w = _f64(weights)
    Xv = value_of(X)
    n, d = Xv.shape
    if w.shape != (d, d):
        raise ShapeError(f"weight matrix must be ({d},{d}), got {w.shape}")
    total = None
    for j in range(d):
        e = np.zeros((1, d))
        e[0, j] = 1.0
        tangent = np.broadcast_to(e, (n, d))
        out = field(Dual(X, tangent))
        tan, _ = _tangent_or_zero(out)         # rows of d(field)/d(x_j)
        term = tsum(mul(tan, w[:, j]), axis=-1)
        total = term if total is None else add(total, term)
    return total
