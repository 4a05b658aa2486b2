import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from deepvib.nn import (
    AffineLayer,
    ConfigError,
    MlpSpec,
    affine_backward,
    affine_forward,
    dropout,
    dropout_mask,
    grad_check,
    log_softmax,
    relu,
    relu_backward,
    softmax_xent,
    softplus_biased,
    softplus_biased_grad,
    xavier_init,
    xavier_uniform,
)
from deepvib.numcore import Rng, finite_diff_grad
from scipy.special import logsumexp


def test_mlp_spec_validation():
    with pytest.raises(ConfigError):
        MlpSpec(4, (0,), 2)
    with pytest.raises(ConfigError):
        MlpSpec(4, (3,), 2, activation="tanh")


def test_xavier_biases_zero_and_bounded(rng):
    p = xavier_init(rng, MlpSpec(784, (1024,), 10))
    assert all(np.all(v == 0.0) for k, v in p.items() if k.endswith(".b"))
    assert p["enc0.W"].shape == (1024, 784)
    assert np.abs(p["enc0.W"]).max() <= np.sqrt(6 / 1808)


def test_xavier_variance(rng):
    w = xavier_uniform(rng, 784, 1024)
    target = 2 / (784 + 1024)
    assert abs(w.var() / target - 1) < 0.05


def test_affine_identity():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(affine_forward(np.eye(3), np.zeros(3), x), x)


def test_affine_backward_of_sum(rng):
    W, b, x = rng.normal((2, 3)), np.zeros(2), rng.substream("x").normal((4, 3))
    gx, gW, gb = affine_backward(W, x, np.ones((4, 2)))
    np.testing.assert_allclose(gW, np.tile(x.sum(0), (2, 1)))
    np.testing.assert_allclose(gb, [4.0, 4.0])
    np.testing.assert_allclose(gx, np.tile(W.sum(0), (4, 1)))


def test_affine_layer_gradcheck(rng):
    layer = AffineLayer(rng.normal((3, 5)), rng.substream("b").normal(3))
    x = rng.substream("x").normal((4, 5))
    up = rng.substream("u").normal((4, 3))

    def f(theta):
        layer.weight[:] = theta[:15].reshape(3, 5)
        layer.bias[:] = theta[15:]
        layer.zero_grad()
        y = layer.forward(x)
        layer.backward(up)
        return float((y * up).sum()), np.concatenate([layer.grad_weight.ravel(), layer.grad_bias])

    theta = np.concatenate([layer.weight.ravel(), layer.bias])
    assert grad_check(f, theta, 1e-5).passed


def test_affine_layer_accumulates_then_zeroes(rng):
    layer = AffineLayer(rng.normal((2, 2)), np.zeros(2))
    x = np.ones((1, 2))
    layer.forward(x)
    layer.backward(np.ones((1, 2)))
    layer.forward(x)
    layer.backward(np.ones((1, 2)))
    np.testing.assert_array_equal(layer.grad_bias, [2.0, 2.0])
    layer.zero_grad()
    np.testing.assert_array_equal(layer.grad_bias, [0.0, 0.0])


def test_affine_shape_error(rng):
    from deepvib.numcore import ShapeError
    with pytest.raises(ShapeError):
        affine_forward(np.ones((2, 3)), np.zeros(2), np.ones((4, 2)))


def test_relu_values():
    np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    np.testing.assert_array_equal(relu_backward(np.array([-1.0, 0.0, 2.0]), np.ones(3)), [0, 0, 1])


def test_relu_gradcheck_away_from_zero(rng):
    x = rng.normal(20)
    x = x[np.abs(x) > 0.1]
    up = rng.substream("u").normal(x.size)
    g = relu_backward(x, up)
    fd = finite_diff_grad(lambda t: float(relu(t) @ up), x, 1e-6)
    assert np.max(np.abs(g - fd)) < 1e-6


def test_softplus_examples():
    assert softplus_biased(0.0, -5.0) == pytest.approx(6.7153e-3, rel=1e-4)
    assert softplus_biased(5.0, -5.0) == pytest.approx(np.log(2), abs=1e-12)
    assert softplus_biased(1000.0, -5.0) == 995.0


@given(st.floats(-700, 1e300), st.floats(-5, 5))
def test_softplus_positive(x, bias):
    # below about -745 the true value underflows float64 itself
    assert softplus_biased(x, bias) > 0


@given(st.floats(-50, 50))
def test_softplus_grad_matches_fd(x):
    fd = (softplus_biased(x + 1e-6, -5.0) - softplus_biased(x - 1e-6, -5.0)) / 2e-6
    assert abs(softplus_biased_grad(x, -5.0) - fd) < 1e-6


def test_xent_uniform_logits():
    loss, _ = softmax_xent(np.zeros(10), 3)
    assert loss == pytest.approx(np.log(10), abs=1e-12)


def test_xent_confident():
    logits = np.zeros(10)
    logits[4] = 30.0
    loss, _ = softmax_xent(logits, 4)
    assert loss < 1e-12


def test_xent_grad_fd(rng):
    logits = rng.normal((5, 7))
    y = np.array([0, 3, 6, 2, 2])
    _, g = softmax_xent(logits, y)
    fd = finite_diff_grad(lambda t: softmax_xent(t, y)[0], logits, 1e-6)
    assert np.max(np.abs(g - fd)) < 1e-6


@given(arrays(np.float64, st.integers(2, 20), elements=st.floats(-1e3, 1e3)))
def test_log_softmax_normalized(logits):
    assert abs(logsumexp(log_softmax(logits))) < 1e-12


def test_dropout_identity_cases(rng):
    x = rng.normal((3, 4))
    np.testing.assert_array_equal(dropout(x, 0.0, rng, True), x)
    np.testing.assert_array_equal(dropout(x, 0.7, rng, False), x)


def test_dropout_rate_range(rng):
    with pytest.raises(ConfigError):
        dropout(np.ones(3), 1.0, rng, True)
    with pytest.raises(ConfigError):
        dropout_mask(rng, (3,), -0.1)


def test_dropout_preserves_mean(rng):
    y = dropout(np.ones(10**6), 0.5, rng, True)
    assert abs(y.mean() - 1.0) < 0.01
    assert set(np.unique(y)) <= {0.0, 2.0}


def test_grad_check_linear_regression(rng):
    X, t = rng.normal((20, 3)), rng.substream("t").normal(20)

    def f(w):
        r = X @ w - t
        return 0.5 * float(r @ r), X.T @ r

    assert grad_check(f, rng.substream("w").normal(3), 1e-7).passed


def test_grad_check_flags_corruption(rng):
    def f(w):
        return float(w @ w), 2 * w + 0.01

    rep = grad_check(f, rng.normal(4), 1e-5)
    assert not rep.passed
    assert rep.max_rel_error == pytest.approx(0.01, rel=1e-3)
