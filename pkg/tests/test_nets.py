import numpy as np
import pytest

from velmatch import autodiff as ad
from velmatch.errors import ShapeError
from velmatch.nets import (MlpSpec, ParamStore, init_mlp_params, merge_layouts,
                           mlp_apply, mlp_layout, param_grad, scoped_params)

from oracles import fd_grad, fd_partial_t, rel_err


def make_net(rng, input_dim=2, hidden=(3, 3), output_dim=2, **kw):
    spec = MlpSpec(input_dim, hidden, output_dim, **kw)
    params = init_mlp_params(spec, rng, zero_output=False)
    return spec, params


def test_paramstore_layout_roundtrip():
    layout = [("a/w", (2, 3)), ("a/b", (3,)), ("c", ())]
    store = ParamStore(np.arange(10.0), layout)
    assert store.view("a/w").shape == (2, 3)
    np.testing.assert_allclose(store.view("a/b"), [6.0, 7.0, 8.0])
    assert store.view("c").shape == ()
    flat = store.flatten_named(store.views())
    np.testing.assert_allclose(flat, store.values)


def test_paramstore_total_length_checked():
    with pytest.raises(ShapeError):
        ParamStore(np.zeros(5), [("w", (2, 3))])


def test_paramstore_views_share_memory():
    store = ParamStore.zeros([("w", (2, 2))])
    store.view("w")[0, 0] = 5.0
    assert store.values[0] == 5.0


def test_zero_params_give_zero_output():
    spec = MlpSpec(3, (4, 4), 2)
    store = ParamStore.zeros(mlp_layout(spec))
    out = mlp_apply(spec, store.views(), None, np.array([0.3, -1.0, 2.0]))
    np.testing.assert_allclose(out, [0.0, 0.0])


def test_single_linear_layer_identity():
    spec = MlpSpec(2, (), 2)
    store = ParamStore.zeros(mlp_layout(spec))
    store.view("layer0/weight")[:] = np.eye(2)
    out = mlp_apply(spec, store.views(), None, np.array([1.0, 2.0]))
    np.testing.assert_allclose(out, [1.0, 2.0])


def test_mlp_rejects_wrong_input_dim():
    rng = np.random.default_rng(0)
    spec, params = make_net(rng)
    with pytest.raises(ShapeError):
        mlp_apply(spec, params.views(), None, np.zeros(5))


def test_mlp_deterministic_bitwise():
    rng = np.random.default_rng(1)
    spec, params = make_net(rng, time_embed_dim=4)
    x = rng.normal(size=(5, 2))
    a = mlp_apply(spec, params.views(), 0.37, x)
    b = mlp_apply(spec, params.views(), 0.37, x)
    assert np.array_equal(a, b)


def test_batch_matches_single_rows():
    rng = np.random.default_rng(2)
    spec, params = make_net(rng, time_embed_dim=4)
    X = rng.normal(size=(4, 2))
    batch = mlp_apply(spec, params.views(), 0.2, X)
    for r in range(4):
        row = mlp_apply(spec, params.views(), 0.2, X[r])
        np.testing.assert_allclose(batch[r], row, rtol=1e-14)


def test_param_grad_matches_fd_one_weight():
    rng = np.random.default_rng(3)
    spec, params = make_net(rng)
    x = rng.normal(size=2)

    def loss(p):
        out = mlp_apply(spec, p, None, x)
        return ad.tsum(ad.mul(out, out))

    g = param_grad(loss, params)
    # perturb a single weight entry with h = 1e-6, compare that gradient entry
    i = 7
    h = 1e-6

    def loss_at(v):
        vals = params.values.copy()
        vals[i] = v
        p2 = params.replace(vals)
        return float(ad.value_of(loss(p2.views())))

    fd = (loss_at(params.values[i] + h) - loss_at(params.values[i] - h)) / (2 * h)
    assert abs(g[i] - fd) / max(abs(fd), 1e-12) < 1e-5


@pytest.mark.parametrize("kw", [
    dict(),
    dict(use_layer_norm=True),
    dict(time_embed_dim=4),
    dict(time_embed_dim=8, use_layer_norm=True),
    dict(activation="celu"),
])
def test_param_grad_matches_fd_full(kw):
    rng = np.random.default_rng(4)
    spec, params = make_net(rng, **kw)
    x = rng.normal(size=(3, 2))
    t = 0.41 if spec.time_embed_dim else None
    w = rng.normal(size=(3, 2))

    def loss_from_values(vals):
        p = params.replace(vals).views()
        out = mlp_apply(spec, p, t, x)
        return float(ad.value_of(ad.tsum(ad.mul(w, ad.mul(out, out)))))

    def loss_ops(p):
        out = mlp_apply(spec, p, t, x)
        return ad.tsum(ad.mul(w, ad.mul(out, out)))

    g = param_grad(loss_ops, params)
    g_fd = fd_grad(loss_from_values, params.values, h=1e-5)
    assert rel_err(g, g_fd) < 1e-4


def test_input_grad_matches_fd():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        spec, params = make_net(rng, input_dim=3, hidden=(4,), output_dim=1)
        x = rng.normal(size=3)

        def f(xx):
            return ad.reshape(mlp_apply(spec, params.views(), None, xx), ())

        g = ad.input_grad(f, x)
        g_fd = fd_grad(lambda z: float(ad.value_of(f(z))), x, h=1e-5)
        worst = max(worst, rel_err(g, g_fd))
    assert worst < 1e-4


def test_time_partial_matches_fd():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        spec, params = make_net(rng, time_embed_dim=4)
        x = rng.normal(size=2)
        t = rng.uniform(0.1, 2.0)
        out_t = ad.time_partial(lambda tt, xx: mlp_apply(spec, params.views(), tt, xx), t, x)
        fd = fd_partial_t(lambda tt: mlp_apply(spec, params.views(), tt, x), t, h=1e-5)
        worst = max(worst, rel_err(out_t, fd))
    assert worst < 1e-5


def test_mlp_divergence_matches_fd():
    rng = np.random.default_rng(7)
    spec, params = make_net(rng, input_dim=3, hidden=(5, 5), output_dim=3)

    def field(x):
        return mlp_apply(spec, params.views(), None, x)

    x = rng.normal(size=3)
    div = ad.value_of(ad.divergence_exact(field, x, 3))
    J = np.zeros((3, 3))
    h = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        J[:, i] = (field(x + e) - field(x - e)) / (2 * h)
    assert abs(div - np.trace(J)) < 1e-5


def test_merge_and_scope():
    l1 = [("w", (2,))]
    l2 = [("w", (3,))]
    merged = merge_layouts(("a", l1), ("b", l2))
    store = ParamStore(np.arange(5.0), merged)
    sub = scoped_params(store.views(), "b")
    np.testing.assert_allclose(sub["w"], [2.0, 3.0, 4.0])


def test_init_zero_output_layer():
    rng = np.random.default_rng(8)
    spec = MlpSpec(2, (3,), 2, time_embed_dim=4)
    params = init_mlp_params(spec, rng, zero_output=True)
    out = mlp_apply(spec, params.views(), 1.3, np.array([[0.5, -0.5]]))
    np.testing.assert_allclose(out, np.zeros((1, 2)))


def test_silu_derivative_chain_matches_fd():
    from oracles import fd_grad as _fd
    xs = np.linspace(-3, 3, 11)
    for fn, ref in ((ad.silu, None), (ad.silu_grad, ad.silu), (ad.silu_grad2, ad.silu_grad)):
        if ref is None:
            continue
        got = fn(xs)
        fd = np.array([(ad.value_of(ref(x + 1e-6)) - ad.value_of(ref(x - 1e-6))) / 2e-6
                       for x in xs])
        np.testing.assert_allclose(got, fd, atol=1e-8)


@pytest.mark.parametrize("ln", [False, True])
def test_mlp_forward_jvp_matches_dual(ln):
    rng = np.random.default_rng(9)
    spec = MlpSpec(3, (5, 4), 2, use_layer_norm=ln)
    params = init_mlp_params(spec, rng, zero_output=False)
    X = rng.normal(size=(6, 3))
    tan = rng.normal(size=(6, 3))

    out, out_tan = ad.value_of(np.zeros(1)), None
    out, out_tan = __import__("velmatch.nets", fromlist=["mlp_forward_jvp"]).mlp_forward_jvp(
        spec, params.views(), X, tan)
    dual_out = mlp_apply(spec, params.views(), None, ad.Dual(X, tan))
    np.testing.assert_allclose(ad.value_of(out), ad.value_of(dual_out.primal), rtol=1e-12)
    np.testing.assert_allclose(ad.value_of(out_tan), ad.value_of(dual_out.tangent), rtol=1e-9, atol=1e-12)


def test_mlp_forward_jvp_probe_stack():
    from velmatch.nets import mlp_forward_jvp
    rng = np.random.default_rng(10)
    spec = MlpSpec(3, (4,), 3, use_layer_norm=True)
    params = init_mlp_params(spec, rng, zero_output=False)
    X = rng.normal(size=(5, 3))
    probes = np.broadcast_to(np.eye(3)[None], (5, 3, 3)).copy()
    out, tans = mlp_forward_jvp(spec, params.views(), X, probes)
    # each probe slice must equal a single-direction call
    for k in range(3):
        _, tan1 = mlp_forward_jvp(spec, params.views(), X, probes[:, k, :])
        np.testing.assert_allclose(ad.value_of(tans)[:, k, :], ad.value_of(tan1), rtol=1e-12)


def test_mlp_forward_jvp_param_grad_of_divergence():
    # reverse over the fused tangent path: d/dtheta of sum_rows div_x(net)
    from velmatch.nets import mlp_forward_jvp
    rng = np.random.default_rng(11)
    spec = MlpSpec(2, (4,), 2)
    params = init_mlp_params(spec, rng, zero_output=False)
    X = rng.normal(size=(3, 2))
    probes = np.broadcast_to(np.eye(2)[None], (3, 2, 2)).copy()

    def loss(p):
        out, tans = mlp_forward_jvp(spec, p, X, probes)
        div = ad.add(ad.reshape(ad.gather_cols(ad.gather_rows(ad.reshape(tans, (-1, 2)), 
                     np.arange(0, 6, 2)), [0]), (-1,)),
                     ad.reshape(ad.gather_cols(ad.gather_rows(ad.reshape(tans, (-1, 2)),
                     np.arange(1, 6, 2)), [1]), (-1,)))
        return ad.tsum(div)

    g = param_grad(loss, params)

    def loss_val(vals):
        p = params.replace(vals).views()
        tot = 0.0
        for r in range(3):
            for k in range(2):
                e = np.zeros(2); e[k] = 1.0
                _, tan = mlp_forward_jvp(spec, p, X[r:r+1], e[None, :])
                tot += ad.value_of(tan)[0, k]
        return tot

    g_fd = fd_grad(loss_val, params.values, h=1e-6)
    assert rel_err(g, g_fd) < 1e-5
