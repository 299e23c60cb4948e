import numpy as np
import pytest
from hypothesis import given, strategies as st

from avgflow import autodiff as ad
from avgflow.errors import ConfigError, NumericError
from avgflow.nn import (CouplingFlow, FlowSpec, MlpSpec, decode_checkpoint, encode_checkpoint,
                        flow_forward, flow_inverse, load_checkpoint, load_text_export, mlp_apply,
                        save_checkpoint, standard_normal_logpdf)
from conftest import assert_fd_close, fd_gradient


def random_flow(dim, n_layers, hidden, seed, scale=0.3):
    spec = FlowSpec(dim, n_layers, hidden)
    params = np.random.default_rng(seed).normal(scale=scale, size=spec.n_params)
    return spec, params


def numerical_jacobian(f, z, h=1e-6):
    cols = []
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = h
        cols.append((f(z + e) - f(z - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def test_param_count_matches_layout():
    spec = MlpSpec((3, 7, 2))
    assert spec.n_params == 3 * 7 + 7 + 7 * 2 + 2
    assert FlowSpec(10, 2, 5).n_params == 240


def test_mlp_zero_params_give_zero_output():
    spec = MlpSpec((3, 4, 2))
    out = mlp_apply(spec, np.zeros(spec.n_params), np.ones((5, 3)))
    np.testing.assert_array_equal(out, np.zeros((5, 2)))


def test_mlp_single_linear_layer_identity_plus_bias():
    spec = MlpSpec((2, 2))
    b = np.array([0.5, -1.5])
    params = np.concatenate([np.eye(2).ravel(), b])
    x = np.array([[1.0, 2.0], [-3.0, 0.25]])
    np.testing.assert_allclose(mlp_apply(spec, params, x), x + b, rtol=0, atol=1e-15)


def test_mlp_tanh_hidden_unit_hand_value():
    spec = MlpSpec((1, 1, 1), "tanh")
    w1, b1, w2, b2 = 0.7, -0.2, 1.5, 0.1
    out = mlp_apply(spec, np.array([w1, b1, w2, b2]), np.array([[2.0]]))
    assert out[0, 0] == pytest.approx(w2 * np.tanh(w1 * 2.0 + b1) + b2, abs=1e-15)


def test_mlp_rejects_wrong_widths():
    with pytest.raises(ConfigError):
        mlp_apply(MlpSpec((3, 2)), np.zeros(8), np.ones((1, 4)))


def test_identity_flow_at_init():
    spec = FlowSpec(5, 3, 4)
    params = spec.init_params(np.random.default_rng(0))
    z = np.random.default_rng(1).normal(size=(7, 5))
    y, logdet = flow_forward(spec, params, z)
    np.testing.assert_array_equal(y, z)
    np.testing.assert_array_equal(logdet, np.zeros(7))
    zi, ld_inv = flow_inverse(spec, params, z)
    np.testing.assert_array_equal(zi, z)
    np.testing.assert_array_equal(ld_inv, np.zeros(7))


def test_single_layer_constant_scale():
    spec = FlowSpec(2, 1, 3)
    params = np.zeros(spec.n_params)
    k, a, b, net, s_off, t_off = next(spec.layer_layout())
    c = 0.8
    params[s_off + net.n_params - 1] = c
    z = np.array([[0.3, -1.1]])
    y, logdet = flow_forward(spec, params, z)
    np.testing.assert_allclose(y, [[0.3, -1.1 * np.exp(c)]], rtol=1e-15)
    assert logdet[0] == pytest.approx(c, abs=1e-15)


@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 10 ** 6))
def test_round_trip_and_logdet_consistency(dim, n_layers, seed):
    spec, params = random_flow(dim, n_layers, 6, seed)
    z = np.random.default_rng(seed + 1).normal(size=(20, dim))
    y, ld = flow_forward(spec, params, z)
    zz, ld_inv = flow_inverse(spec, params, y)
    assert np.max(np.abs(zz - z)) <= 1e-8
    np.testing.assert_allclose(ld + ld_inv, 0.0, atol=1e-10)


@pytest.mark.parametrize("dim", [1, 2, 3, 4])
def test_logdet_matches_numerical_jacobian(dim):
    spec, params = random_flow(dim, 3, 5, dim, scale=0.5)
    pts = np.random.default_rng(7).normal(size=(10, dim))
    for z in pts:
        jac = numerical_jacobian(lambda v: flow_forward(spec, params, v[None])[0][0], z)
        _, ld = flow_forward(spec, params, z[None])
        assert abs(np.linalg.slogdet(jac)[1] - ld[0]) <= 1e-5


def test_log_density_change_of_variables():
    spec, params = random_flow(3, 2, 4, 3)
    flow = CouplingFlow(spec, params)
    z = np.random.default_rng(2).normal(size=(6, 3))
    y, ld = flow.forward(z)
    np.testing.assert_allclose(flow.log_density(y), standard_normal_logpdf(z) - ld, atol=1e-10)


def test_logdet_is_sum_of_single_layer_logdets():
    spec, params = random_flow(4, 3, 5, 11)
    z = np.random.default_rng(3).normal(size=(5, 4))
    total = np.zeros(5)
    h = z
    off = 0
    for k in range(3):
        layer = FlowSpec(4, 1, 5)
        # a one-layer flow starting at layer k needs the mask parity of layer k
        if k % 2:
            perm = np.r_[2:4, 0:2]
            sub = params[off:off + layer.n_params]
            y, ld = flow_forward(layer, sub, h[:, perm])
            h = y[:, np.argsort(perm)]
        else:
            h, ld = flow_forward(layer, params[off:off + layer.n_params], h)
        total += ld
        off += layer.n_params
    y, ld_full = flow_forward(spec, params, z)
    np.testing.assert_allclose(h, y, atol=1e-13)
    np.testing.assert_allclose(total, ld_full, atol=1e-12)


def test_affine_init_gives_requested_map():
    spec = FlowSpec(6, 2, 4)
    params = spec.init_params(np.random.default_rng(0))
    shift = np.arange(6.0)
    params = spec.affine_init(params, shift, np.log(0.5))
    z = np.random.default_rng(1).normal(size=(3, 6))
    y, ld = flow_forward(spec, params, z)
    np.testing.assert_allclose(y, shift + 0.5 * z, atol=1e-14)
    np.testing.assert_allclose(ld, 6 * np.log(0.5), atol=1e-12)


def test_flow_gradient_matches_finite_differences():
    spec, params = random_flow(3, 2, 4, 5)
    z = np.random.default_rng(9).normal(size=(4, 3))

    def obj(t):
        y, ld = flow_forward(spec, t, z)
        return ad.add(ad.sum_(ad.square(y)), ad.sum_(ld))

    _, g = ad.loss_and_gradient(obj, params)
    fd = fd_gradient(lambda p: float(obj(ad.Tensor(p)).value), params)
    assert_fd_close(g, fd)


def test_scale_overflow_is_clamped_and_nonfinite_input_names_layer():
    spec, params = random_flow(2, 2, 3, 0, scale=50.0)
    y, _ = flow_forward(spec, params, np.ones((1, 2)))
    assert np.all(np.isfinite(y))
    with pytest.raises(NumericError, match="layer"):
        flow_forward(spec, params, np.array([[np.inf, 0.0]]))


def test_checkpoint_round_trip(tmp_path):
    spec, params = random_flow(4, 2, 3, 1)
    path = tmp_path / "flow.ckpt"
    save_checkpoint(path, spec, params)
    spec2, params2 = load_checkpoint(path)
    assert spec2 == spec
    np.testing.assert_array_equal(params2, params)
    np.testing.assert_array_equal(load_text_export(str(path) + ".txt"), params)
    mspec = MlpSpec((2, 5, 1), "softplus")
    mparams = np.arange(mspec.n_params, dtype=float)
    assert decode_checkpoint(encode_checkpoint(mspec, mparams))[0] == mspec


def test_checkpoint_rejects_garbage():
    with pytest.raises(ConfigError):
        decode_checkpoint(b"not a checkpoint")
