import numpy as np
import pytest

from velmatch import autodiff as ad
from velmatch.errors import CapabilityError
from velmatch.flows import NodeModel, TipfModel
from velmatch.measures import GaussianMeasure
from velmatch.ode import IntegratorConfig

from oracles import expm_psd, fd_grad, rel_err, trapezoid_1d


def tipf_random(rng, dim=2, scale=0.3, hidden=(6, 6), e=4, base=None):
    base = base or GaussianMeasure(np.zeros(dim), np.eye(dim))
    m = TipfModel.build(dim, base, rng, cond_hidden=hidden, time_embed_dim=e)
    m.params.values[:] = rng.normal(0.0, scale, m.params.size)
    return m


def tipf_identity(rng, dim=2, base=None):
    # freshly built conditioners have zero output layers: the map is identity
    base = base or GaussianMeasure(np.zeros(dim), np.eye(dim))
    return TipfModel.build(dim, base, rng, cond_hidden=(5,), time_embed_dim=4)


def node_linear(a_psd, base, rank=None):
    """Velocity-field model planted to v(x) = A x for PSD A (zero net)."""
    d = a_psd.shape[0]
    rank = rank or d
    rng = np.random.default_rng(0)
    m = NodeModel.build(d, base, rng, hidden=(4,), time_embed_dim=4, rank=rank,
                        use_layer_norm=False,
                        integrator=IntegratorConfig(rtol=1e-8, atol=1e-8))
    m.params.values[:] = 0.0
    L = np.linalg.cholesky(a_psd)
    m.params.view("skip/lmap/bias")[:] = L.reshape(-1)
    return m


# ---------------------------------------------------------------------------
# TIPF


def test_tipf_identity_at_init():
    rng = np.random.default_rng(0)
    m = tipf_identity(rng)
    x = rng.normal(size=(7, 2))
    for t in (0.0, 0.3, 1.7):
        np.testing.assert_allclose(m.flow_map(t, x), x, atol=1e-14)
        z, logdet = m.inverse_map(t, x)
        np.testing.assert_allclose(z, x, atol=1e-14)
        np.testing.assert_allclose(logdet, 0.0, atol=1e-14)
        np.testing.assert_allclose(m.velocity(t, x), 0.0, atol=1e-14)


def test_tipf_round_trip_tight():
    rng = np.random.default_rng(1)
    m = tipf_random(rng)
    worst = 0.0
    for _ in range(20):
        x = rng.normal(size=(50, 2)) * 2.0
        t = rng.uniform(0.0, 2.0, size=50)
        y = m.flow_map(t, x)
        z, _ = m.inverse_map(t, y)
        worst = max(worst, float(np.max(np.abs(z - x))))
    assert worst < 1e-10


def test_tipf_inverse_logdet_matches_fd_jacobian():
    rng = np.random.default_rng(2)
    m = tipf_random(rng, dim=2)
    t = 0.7
    y = rng.normal(size=(1, 2))
    _, logdet = m.inverse_map(t, y)
    h = 1e-6
    J = np.zeros((2, 2))
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        zp, _ = m.inverse_map(t, y + e)
        zm, _ = m.inverse_map(t, y - e)
        J[:, k] = (zp[0] - zm[0]) / (2 * h)
    assert abs(logdet[0] - np.log(abs(np.linalg.det(J)))) < 1e-6


def test_tipf_velocity_matches_path_derivative():
    rng = np.random.default_rng(3)
    m = tipf_random(rng)
    worst = 0.0
    for _ in range(20):
        x0 = rng.normal(size=(1, 2))
        t = rng.uniform(0.1, 1.9)
        h = 1e-5
        y = m.flow_map(t, x0)
        fd = (m.flow_map(t + h, x0) - m.flow_map(t - h, x0)) / (2 * h)
        v = m.velocity(t, y)
        worst = max(worst, rel_err(v, fd))
    assert worst < 1e-4


def test_tipf_score_matches_fd():
    rng = np.random.default_rng(4)
    m = tipf_random(rng)
    t = 0.9
    x = rng.normal(size=(5, 2))
    s = m.score(t, x)
    for r in range(5):
        g_fd = fd_grad(lambda z: float(ad.value_of(m.log_density(t, z[None, :]))[0]),
                       x[r], h=1e-5)
        assert rel_err(s[r], g_fd) < 1e-4


def test_tipf_identity_score_is_gaussian_score():
    rng = np.random.default_rng(5)
    mean = np.array([0.5, -1.0])
    var = 4.0
    m = tipf_identity(rng, base=GaussianMeasure(mean, var * np.eye(2)))
    x = rng.normal(size=(6, 2))
    np.testing.assert_allclose(m.score(1.3, x), -(x - mean) / var, atol=1e-12)


def test_tipf_density_normalizes_1d():
    rng = np.random.default_rng(6)
    m = tipf_random(rng, dim=1, hidden=(5,), e=4)
    for t in rng.uniform(0.0, 2.0, size=5):
        mass = trapezoid_1d(
            lambda xs: np.exp(ad.value_of(m.log_density(t, xs[:, None]))), -14, 14, 6001)
        assert abs(mass - 1.0) < 1e-3


def test_tipf_pushforward_matches_density_cdf():
    rng = np.random.default_rng(7)
    m = tipf_random(rng, dim=1, hidden=(5,), e=4)
    t = 1.1
    n = 40_000
    samples = m.sample_path([t], n, rng)[:, 0, 0]
    for a in (-1.0, 0.3, 1.5):
        emp = np.mean(samples <= a)
        quad = trapezoid_1d(
            lambda xs: np.exp(ad.value_of(m.log_density(t, xs[:, None]))), -14, a, 4001)
        assert abs(emp - quad) < 4.0 / np.sqrt(n) + 2e-3


def test_tipf_log_density_vs_divergence_integral():
    # exact change of variables must agree with integrating div v along the
    # flow's own velocity field (instantaneous change of variables), starting
    # from the model's time-zero density
    rng = np.random.default_rng(8)
    m = tipf_random(rng, dim=1, hidden=(4,), e=4, scale=0.25)
    t = 0.8
    y0 = m.flow_map(0.0, np.array([[0.4]]))
    from velmatch.ode import OdeProblem, dopri5_adaptive

    def rhs(s, aug):
        x = aug[:1].reshape(1, 1)
        v = ad.value_of(m.velocity(s, x))
        div = ad.value_of(ad.divergence_batch(lambda X: m.velocity(s, X), x))
        return np.array([v[0, 0], div[0]])

    aug, _ = dopri5_adaptive(OdeProblem(rhs, 0.0, t, np.array([y0[0, 0], 0.0])),
                             rtol=1e-9, atol=1e-9)
    xt, int_div = aug[0], aug[1]
    lhs = ad.value_of(m.log_density(t, np.array([[xt]])))[0]
    rhs_val = ad.value_of(m.log_density(0.0, y0))[0] - int_div
    assert abs(lhs - rhs_val) < 1e-3


def test_tipf_deterministic():
    rng = np.random.default_rng(9)
    m = tipf_random(rng)
    x = rng.normal(size=(4, 2))
    assert np.array_equal(m.flow_map(0.5, x), m.flow_map(0.5, x))


def test_tipf_init_penalty_zero_at_identity():
    rng = np.random.default_rng(10)
    m = tipf_identity(rng)
    x = rng.normal(size=(20, 2))
    assert float(ad.value_of(m.init_penalty(x))) < 1e-28


# ---------------------------------------------------------------------------
# NODE


def test_node_flow_map_t0_exact():
    base = GaussianMeasure(np.zeros(2), np.eye(2))
    m = node_linear(np.array([[0.5, 0.2], [0.2, 0.4]]), base)
    x = np.random.default_rng(0).normal(size=(5, 2))
    np.testing.assert_array_equal(m.flow_map(0.0, x), x)


def test_node_linear_field_matches_matrix_exponential():
    A = np.array([[0.5, 0.2], [0.2, 0.4]])
    base = GaussianMeasure(np.zeros(2), np.eye(2))
    m = node_linear(A, base)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(6, 2))
    for t in (0.3, 1.0):
        want = x @ expm_psd(A, t).T
        got = m.flow_map(t, x)
        assert np.max(np.abs(got - want)) < 1e-5


def test_node_velocity_is_network_output():
    rng = np.random.default_rng(2)
    base = GaussianMeasure(np.zeros(3), np.eye(3))
    m = NodeModel.build(3, base, rng, hidden=(8,), time_embed_dim=4, rank=2,
                        use_layer_norm=False)
    m.params.values[:] = rng.normal(0, 0.3, m.params.size)
    x = rng.normal(size=(4, 3))
    v1 = ad.value_of(m.velocity(0.6, x))
    v2 = ad.value_of(m.velocity(0.6, x))
    assert np.array_equal(v1, v2)
    # jacobian probes agree with the generic engine
    div_fast = ad.value_of(m.divergence(0.6, x))
    div_ref = ad.value_of(ad.divergence_batch(lambda X: m.velocity(0.6, X), x))
    np.testing.assert_allclose(div_fast, div_ref, rtol=1e-10)


def test_node_round_trip():
    rng = np.random.default_rng(3)
    base = GaussianMeasure(np.zeros(2), np.eye(2))
    m = NodeModel.build(2, base, rng, hidden=(8, 8), time_embed_dim=4, rank=2,
                        use_layer_norm=True,
                        integrator=IntegratorConfig(rtol=1e-4, atol=1e-4))
    m.params.values[:] = rng.normal(0, 0.2, m.params.size)
    x = rng.normal(size=(6, 2))
    t = 1.0
    y = m.flow_map(t, x)
    z, _ = m.inverse_map(t, y)
    assert np.max(np.abs(z - x)) < 1e-3


def test_node_log_density_expansion_1d():
    # v(x) = x in 1d: log p_t(e^t x0) = log p0(x0) - t
    base = GaussianMeasure(np.zeros(1), np.eye(1))
    m = node_linear(np.array([[1.0]]), base)
    x0 = np.array([[0.7]])
    t = 0.9
    got = m.log_density(t, np.exp(t) * x0)
    want = ad.value_of(base.log_density(x0)) - t
    assert abs(got[0] - want[0]) < 1e-4


def test_node_log_density_t0_is_base():
    base = GaussianMeasure(np.zeros(2), 2.0 * np.eye(2))
    m = node_linear(np.array([[0.3, 0.0], [0.0, 0.2]]), base)
    x = np.random.default_rng(4).normal(size=(5, 2))
    np.testing.assert_allclose(m.log_density(0.0, x),
                               ad.value_of(base.log_density(x)), atol=1e-12)


def test_node_density_normalizes_1d():
    base = GaussianMeasure(np.zeros(1), np.eye(1))
    m = node_linear(np.array([[0.8]]), base)
    t = 0.5
    mass = trapezoid_1d(
        lambda xs: np.exp(np.array([m.log_density(t, np.array([[x]]))[0] for x in xs])),
        -10, 10, 801)
    assert abs(mass - 1.0) < 1e-3


def test_node_score_refused_by_default():
    base = GaussianMeasure(np.zeros(2), np.eye(2))
    m = node_linear(np.array([[0.5, 0.0], [0.0, 0.5]]), base)
    with pytest.raises(CapabilityError):
        m.score(0.5, np.zeros((1, 2)))


def test_node_score_opt_in_matches_fd():
    base = GaussianMeasure(np.zeros(1), np.eye(1))
    m = node_linear(np.array([[1.0]]), base)
    m.score_via_density = True
    m.score_steps = 64
    t = 0.6
    x = np.array([[0.5], [-0.8]])
    s = m.score(t, x)
    for r in range(2):
        fd = (m.log_density(t, x[r:r + 1] + 1e-5) - m.log_density(t, x[r:r + 1] - 1e-5)) / 2e-5
        assert abs(s[r, 0] - fd[0]) < 1e-3


def test_node_sample_path_t0_is_base_and_mean_propagates():
    A = np.array([[0.4, 0.1], [0.1, 0.3]])
    mean0 = np.array([1.0, -0.5])
    base = GaussianMeasure(mean0, 0.5 * np.eye(2))
    m = node_linear(A, base)
    seed = 11
    n = 4000
    paths = m.sample_path([0.0, 1.0], n, np.random.default_rng(seed))
    np.testing.assert_array_equal(paths[:, 0, :], base.sample(n, np.random.default_rng(seed)))
    want = expm_psd(A, 1.0) @ mean0
    se = np.sqrt(np.diag(expm_psd(A, 1.0) @ (0.5 * np.eye(2)) @ expm_psd(A, 1.0).T) / n)
    assert np.all(np.abs(paths[:, 1, :].mean(axis=0) - want) < 3 * se + 1e-4)


def test_identity_flow_sample_columns_identical():
    rng = np.random.default_rng(12)
    m = tipf_identity(rng)
    paths = m.sample_path([0.0, 0.5, 1.0], 50, rng)
    np.testing.assert_allclose(paths[:, 0, :], paths[:, 1, :], atol=1e-14)
    np.testing.assert_allclose(paths[:, 0, :], paths[:, 2, :], atol=1e-14)
