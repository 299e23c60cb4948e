import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from avgflow import autodiff as ad
from conftest import assert_fd_close, fd_gradient

floats = st.floats(-2.0, 2.0, allow_nan=False)


def test_quadratic_gradient_is_params():
    p = np.array([0.3, -1.2, 2.0])
    val, g = ad.loss_and_gradient(lambda t: ad.mul(ad.sum_(ad.square(t)), 0.5), p)
    assert val == pytest.approx(0.5 * np.sum(p * p))
    np.testing.assert_array_equal(g, p)


def test_constant_objective_has_zero_gradient():
    p = np.ones(4)
    val, g = ad.loss_and_gradient(lambda t: ad.add(ad.mul(ad.sum_(t), 0.0), 3.0), p)
    assert val == 3.0
    np.testing.assert_array_equal(g, np.zeros(4))


def test_value_matches_plain_forward_bitwise(rng):
    p = rng.normal(size=6)

    def f(t):
        return ad.sum_(ad.tanh(ad.mul(ad.exp(t), ad.sin(t))))

    val, _ = ad.loss_and_gradient(f, p)
    with ad.no_grad():
        plain = f(ad.Tensor(p)).value
    assert val == float(plain)


def test_relu_subgradient_zero_at_zero():
    _, g = ad.loss_and_gradient(lambda t: ad.sum_(ad.relu(t)), np.array([0.0, 1.0, -1.0]))
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])


@given(hnp.arrays(np.float64, 5, elements=floats))
def test_elementwise_chain_matches_finite_differences(p):
    def f(t):
        u = ad.add(ad.softplus(t), ad.mul(ad.cos(t), ad.log1p(ad.square(t))))
        v = ad.div(ad.tanh(u), ad.add(ad.sqrt(ad.add(ad.square(t), 1.0)), 0.5))
        return ad.sum_(ad.power(ad.add(ad.square(v), 0.1), 1.5))

    _, g = ad.loss_and_gradient(f, p)
    fd = fd_gradient(lambda x: float(f(ad.Tensor(x)).value), p)
    assert_fd_close(g, fd)


@given(hnp.arrays(np.float64, 12, elements=floats))
def test_matmul_reshape_indexing_gradients(p):
    x = np.linspace(-1, 1, 6).reshape(2, 3)

    def f(t):
        w = ad.reshape(ad.getitem(t, slice(0, 9)), (3, 3))
        b = ad.getitem(t, slice(9, 12))
        h = ad.tanh(ad.linear(x, w, b))
        cat = ad.concat([h, ad.take(h, np.array([2, 0]))], axis=-1)
        col = ad.broadcast_to(ad.reshape(ad.getitem(t, slice(0, 5)), (5, 1)), (5, 2))
        return ad.mean(ad.square(ad.matmul(cat, col)))

    _, g = ad.loss_and_gradient(f, p)
    fd = fd_gradient(lambda v: float(f(ad.Tensor(v)).value), p)
    assert_fd_close(g, fd)


def test_advanced_index_accumulates_repeated_entries():
    _, g = ad.loss_and_gradient(lambda t: ad.sum_(ad.getitem(t, np.array([0, 0, 2]))), np.zeros(3))
    np.testing.assert_array_equal(g, [2.0, 0.0, 1.0])


def test_broadcast_gradients_are_reduced():
    a = ad.Tensor(np.ones((3, 1)), requires_grad=True)
    b = ad.Tensor(np.arange(4.0), requires_grad=True)
    out = ad.sum_(ad.mul(a, b))
    ga, gb = ad.gradients(out, [a, b])
    np.testing.assert_array_equal(ga, np.full((3, 1), 6.0))
    np.testing.assert_array_equal(gb, np.full(4, 3.0))


def test_no_grad_records_nothing():
    a = ad.Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        out = ad.exp(a)
    assert not out.requires_grad


def test_per_sample_linear_independent_of_batch(rng):
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(4, 3, 2))
    full = ad.linear(x, w).value
    parts = np.concatenate([ad.linear(x[i:i + 1], w[i:i + 1]).value for i in range(4)])
    np.testing.assert_array_equal(full, parts)
