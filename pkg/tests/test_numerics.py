import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from sgpbae import numerics as nx
from sgpbae.errors import NonScalarRoot, NotPositiveDefinite, ShapeMismatch, SingularMatrix

from helpers import central_diff, rel_err


def spd(n, rng):
    A = rng.standard_normal((n, n))
    return A @ A.T + n * np.eye(n)


def grad_of(build, *arrays):
    """Gradient of ``build(*nodes)`` with respect to each array."""
    g = nx.ExprGraph()
    nodes = [g.param(a) for a in arrays]
    value, grads = nx.evaluate_with_gradients(g, build(*nodes))
    return value, [grads[n] for n in nodes]


def value_of(build, *arrays):
    g = nx.ExprGraph()
    return float(build(*[g.const(a) for a in arrays]).value)


def check_grads(build, *arrays, tol=1e-6):
    _, grads = grad_of(build, *arrays)
    for i, a in enumerate(arrays):
        def f(v, i=i):
            args = list(arrays)
            args[i] = v
            return value_of(build, *args)
        assert rel_err(grads[i], central_diff(f, a)) < tol


def test_cholesky_reconstructs():
    rng = np.random.default_rng(0)
    A = spd(5, rng)
    L = nx.cholesky_decompose(A)
    np.testing.assert_allclose(L @ L.T, A, rtol=1e-12)
    assert np.allclose(L, np.tril(L))


def test_cholesky_rejects_indefinite():
    with pytest.raises(NotPositiveDefinite):
        nx.cholesky_decompose(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(ShapeMismatch):
        nx.cholesky_decompose(np.ones((2, 3)))


def test_triangular_solve_matches_dense():
    rng = np.random.default_rng(1)
    L = np.linalg.cholesky(spd(4, rng))
    B = rng.standard_normal((4, 3))
    np.testing.assert_allclose(nx.triangular_solve(L, B), np.linalg.solve(L, B), rtol=1e-10)
    np.testing.assert_allclose(nx.triangular_solve(L, B, trans=True), np.linalg.solve(L.T, B),
                               rtol=1e-10)


def test_triangular_solve_singular():
    L = np.array([[1.0, 0.0], [3.0, 0.0]])
    with pytest.raises(SingularMatrix):
        nx.triangular_solve(L, np.ones((2, 1)))


def test_jittered_cholesky_handles_rank_deficient():
    v = np.array([[1.0], [2.0], [3.0]])
    K = v @ v.T
    L = nx.jittered_cholesky(K)
    jit = nx.jitter_for(K)
    np.testing.assert_allclose(L @ L.T, K + jit * np.eye(3), rtol=1e-9, atol=1e-12)


def test_jittered_cholesky_gives_up():
    with pytest.raises(NotPositiveDefinite):
        nx.jittered_cholesky(-np.eye(3))


def test_non_scalar_root():
    g = nx.ExprGraph()
    x = g.param(np.ones(3))
    with pytest.raises(NonScalarRoot):
        nx.evaluate_with_gradients(g, nx.exp(x))


def test_unused_parameter_gets_zero_gradient():
    g = nx.ExprGraph()
    x, y = g.param(np.ones(2)), g.param(np.ones(3))
    _, grads = nx.evaluate_with_gradients(g, nx.sum_(x * 2.0))
    np.testing.assert_array_equal(grads[x], [2.0, 2.0])
    np.testing.assert_array_equal(grads[y], np.zeros(3))


def test_shared_subexpression_accumulates():
    # f(x) = (x*x) + (x*x), used twice through the same node
    value, (gx,) = grad_of(lambda x: nx.sum_((lambda s: s + s)(x * x)), np.array([1.5, -2.0]))
    np.testing.assert_allclose(gx, 4 * np.array([1.5, -2.0]))
    assert value == pytest.approx(2 * (1.5**2 + 4.0))


@pytest.mark.parametrize("op", [nx.exp, nx.tanh, nx.sin, nx.square, nx.elu])
def test_unary_gradients(op):
    rng = np.random.default_rng(2)
    check_grads(lambda a: nx.sum_(op(a) * np.arange(1.0, 7.0).reshape(2, 3)),
                rng.standard_normal((2, 3)))


def test_log_sqrt_gradients():
    rng = np.random.default_rng(3)
    a = rng.uniform(0.5, 2.0, (3, 2))
    check_grads(lambda x: nx.sum_(nx.log(x) + nx.sqrt(x) * 3.0), a)


def test_sqrt_zero_subgradient():
    _, (g,) = grad_of(lambda x: nx.sum_(nx.sqrt(x)), np.array([0.0, 4.0]))
    np.testing.assert_allclose(g, [0.0, 0.25])


def test_binary_and_broadcast_gradients():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((3, 4)), rng.uniform(1, 2, (1, 4))
    check_grads(lambda x, y: nx.sum_(nx.square(x * y - x / y + y)), a, b)
    check_grads(lambda x: nx.sum_(nx.broadcast(x, (3, 4)) * a), rng.standard_normal(4))


def test_matmul_transpose_reshape_diag_gradients():
    rng = np.random.default_rng(5)
    A, B = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    check_grads(lambda x, y: nx.sum_(nx.square(x @ y)), A, B)
    check_grads(lambda x: nx.sum_(nx.reshape(nx.transpose(x), (2, 6)) * np.arange(12.0).reshape(2, 6)),
                A)
    check_grads(lambda x: nx.sum_(nx.square(nx.diag(x))), rng.standard_normal((3, 3)))


def test_sum_axis_gradient():
    rng = np.random.default_rng(6)
    check_grads(lambda x: nx.sum_(nx.square(nx.sum_(x, axis=1)) * np.array([1.0, 2.0, 3.0])),
                rng.standard_normal((3, 4)))


def test_cholesky_gradient():
    rng = np.random.default_rng(7)
    A = spd(4, rng)
    W = rng.standard_normal((4, 4))
    # symmetrize inside so finite differences stay on symmetric matrices
    check_grads(lambda x: nx.sum_(nx.cholesky(0.5 * (x + nx.transpose(x))) * W), A)


def test_logdet_gradient_is_inverse():
    rng = np.random.default_rng(8)
    A = spd(3, rng)
    _, (g,) = grad_of(lambda x: nx.sum_(nx.log(nx.diag(nx.cholesky(x)))) * 2.0, A)
    np.testing.assert_allclose(0.5 * (g + g.T), np.linalg.inv(A), rtol=1e-9)


@pytest.mark.parametrize("trans", [False, True])
def test_solve_triangular_gradient(trans):
    rng = np.random.default_rng(9)
    L = np.tril(rng.standard_normal((3, 3))) + 3 * np.eye(3)
    B = rng.standard_normal((3, 2))
    W = rng.standard_normal((3, 2))
    check_grads(lambda l, b: nx.sum_(nx.solve_triangular(l, b, trans=trans) * W), L, B)


def test_gaussian_logpdf_matches_scipy():
    rng = np.random.default_rng(10)
    x, m, v = rng.standard_normal((4, 2)), rng.standard_normal((4, 2)), rng.uniform(0.5, 2, (4, 1))
    expected = stats.norm.logpdf(x, m, np.sqrt(v)).sum()
    assert value_of(nx.gaussian_logpdf, x, m, v) == pytest.approx(expected, rel=1e-12)
    check_grads(nx.gaussian_logpdf, x, m, v)


def test_jittered_cholesky_node_matches_plain():
    rng = np.random.default_rng(11)
    K = spd(4, rng)
    g = nx.ExprGraph()
    node = nx.jittered_cholesky_node(g.const(K))
    np.testing.assert_allclose(node.value, nx.jittered_cholesky(K), rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=6))
def test_tanh_gradient_property(xs):
    x = np.array(xs)
    _, (g,) = grad_of(lambda a: nx.sum_(nx.tanh(a)), x)
    np.testing.assert_allclose(g, 1 - np.tanh(x) ** 2, rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_cholesky_roundtrip_property(n, seed):
    A = spd(n, np.random.default_rng(seed))
    L = nx.cholesky_decompose(A)
    np.testing.assert_allclose(L @ L.T, A, rtol=1e-10, atol=1e-10)
