import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from medgraph import autodiff as ad


def numeric_grad(f, x, h=1e-5):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.reshape(-1)[i] += h
        xm.reshape(-1)[i] -= h
        g.reshape(-1)[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def test_primitive_examples():
    assert ad.sigmoid(0.0).value == 0.5
    assert ad.elu(0.0).value == 0.0
    np.testing.assert_array_equal(ad.softmax(np.array([1.7, 1.7])).value, [0.5, 0.5])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ad.ShapeError, match=r"\(2,\).*\(3,\)"):
        ad.add(np.ones(2), np.ones(3))


def test_square_gradient():
    x = ad.param(3.0)
    ad.backward(x * x)
    assert x.grad == 6.0


def test_repeated_use_accumulates():
    x = ad.param(3.0)
    y = x * x
    z = y * y
    t = z * z
    ad.backward(t)
    assert x.grad == 8 * 3.0 ** 7


def test_backward_rejects_non_scalar_and_non_finite():
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.param(np.ones(3)))
    with pytest.raises(FloatingPointError), np.errstate(divide="ignore"):
        ad.backward(ad.log(ad.param(0.0)))


def test_sum_sigmoid_matmul_matches_finite_differences():
    rng = np.random.default_rng(0)
    W0, x = rng.normal(size=(4, 3)), rng.normal(size=3)
    W = ad.param(W0)
    ad.backward(ad.sum(ad.sigmoid(ad.matmul(W, x))))
    num = numeric_grad(lambda w: ad._np_sigmoid(w @ x).sum(), W0)
    assert rel_err(W.grad, num) < 1e-4


def test_intensity_expression_gradient():
    rng = np.random.default_rng(1)
    vals = {"w": rng.normal(size=5), "w_t": np.array(0.3), "b": np.array(-0.4)}
    h, gap = rng.normal(size=5), 1.7
    rep = ad.grad_check(
        lambda p: ad.exp(ad.matmul(p["w"], h) + p["w_t"] * gap + p["b"]), vals)
    assert rep.passed and rep.worst < 1e-4


def test_grad_check_linear_is_exact():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(3, 2))
    rep = ad.grad_check(lambda p: ad.sum(ad.mul(p["x"], a)), {"x": rng.normal(size=(3, 2))})
    assert rep.worst < 1e-8


def test_grad_check_flags_relu_kink():
    rep = ad.grad_check(lambda p: ad.sum(ad.relu(p["x"])), {"x": np.array([0.0, 1.0])})
    assert rep.status["x"] == "non-differentiable point"
    assert rep.passed


def test_grad_check_reports_wrong_gradient():
    def broken(a):
        a = ad.const(a)
        return ad.Node(a.value ** 2, [(a, lambda g: g * a.value)])  # missing factor 2

    rep = ad.grad_check(lambda p: ad.sum(broken(p["x"])), {"x": np.array([1.0, 2.0])})
    assert rep.status["x"] == "fail" and not rep.passed


def test_relu_subgradient_at_zero_is_zero():
    x = ad.param(np.array([0.0, -1.0, 2.0]))
    ad.backward(ad.sum(ad.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_take_scatter_adds_repeats():
    x = ad.param(np.arange(6.0).reshape(3, 2))
    ad.backward(ad.sum(ad.take(x, [0, 0, 2])))
    np.testing.assert_array_equal(x.grad, [[2, 2], [0, 0], [1, 1]])


def test_expm1_ratio_continuous_across_series_switch():
    x = np.array([0.0, 0.5, 2.0, 9.0])
    for w in (0.0, 1e-12, -1e-6, 1e-5, 3e-5, 1e-3, 0.7, -0.4):
        out = ad.expm1_ratio(w, x).value
        expected = x if w == 0 else np.expm1(w * x) / w
        np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("w", [0.0, 2e-5, 0.3, -0.2])
def test_expm1_ratio_gradients(w):
    rep = ad.grad_check(lambda p: ad.sum(ad.expm1_ratio(p["w"], p["x"])),
                        {"w": np.array(w), "x": np.array([0.1, 1.5, 3.0])})
    assert rep.passed, rep


def test_backward_twice_is_deterministic():
    rng = np.random.default_rng(3)
    W0, x = rng.normal(size=(3, 3)), rng.normal(size=(2, 3))

    def run():
        W = ad.param(W0)
        ad.backward(ad.sum(ad.tanh(ad.matmul(x, W))))
        return W.grad

    np.testing.assert_array_equal(run(), run())


# exp-based entries see tanh-squashed input so chains cannot overflow
UNARY = {
    "exp": lambda a: ad.exp(ad.tanh(a)), "sigmoid": ad.sigmoid, "tanh": ad.tanh, "elu": ad.elu,
    "relu": ad.relu, "square": ad.square, "log_sigmoid": ad.log_sigmoid,
    "softplus_log": lambda a: ad.log(ad.exp(ad.tanh(a)) + 1.0),
    "sqrt_pos": lambda a: ad.sqrt(ad.square(a) + 0.5),
}


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(sorted(UNARY)), min_size=1, max_size=4),
       st.integers(0, 2 ** 31 - 1))
def test_random_compositions_match_central_differences(chain, seed):
    rng = np.random.default_rng(seed)
    params = {"W": rng.uniform(-2, 2, size=(3, 2)), "b": rng.uniform(-2, 2, size=2)}
    x = rng.uniform(-2, 2, size=(4, 3))

    def f(p):
        z = ad.matmul(x, p["W"]) + p["b"]
        for name in chain:
            z = UNARY[name](z)
        return ad.sum(ad.log_softmax(z, axis=-1)) + ad.mean(ad.softmax(z))

    # saturated chains flatten the loss until central differences are
    # dominated by roundoff (~1e-16 |f| / step); those draws say nothing
    leaves = {k: ad.param(v) for k, v in params.items()}
    out = f(leaves)
    ad.backward(out)
    norm = min(np.linalg.norm(leaves[k].grad) for k in leaves)
    assume(norm > 1e-6 * (1.0 + abs(float(out.value))))
    rep = ad.grad_check(f, params, step=1e-5, tol=1e-4)
    assert rep.passed, (chain, rep)


def test_elu_plus_one_matches_elu_and_stays_positive():
    x = np.array([-700.0, -50.0, -1.0, 0.0, 2.5])
    out = ad.elu_plus_one(x).value
    assert (out > 0).all()
    np.testing.assert_allclose(out, [np.exp(-700), np.exp(-50), np.exp(-1), 1.0, 3.5], rtol=1e-12)
    np.testing.assert_allclose(out[2:], ad.elu(x[2:]).value + 1.0, rtol=1e-12)
    rep = ad.grad_check(lambda p: ad.sum(ad.elu_plus_one(p["x"])),
                        {"x": np.array([-3.0, -0.2, 0.4, 2.0])})
    assert rep.passed
