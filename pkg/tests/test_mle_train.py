import numpy as np
import pytest

from avgflow import autodiff as ad
from avgflow.drift_model import GaussianIncrements, PenaltyConfig, penalized_objective
from avgflow.errors import ConfigError, TrainingAborted
from avgflow.kernels import SolventGaussianForce, SolventParams
from avgflow.mle_train import (OptimizerConfig, baseline_drift, baseline_objective, baseline_spec,
                               fit_quantile_transport, transport_samples,
                               fit_penalized_mle, fit_unstructured_baseline, minibatch_index)
from avgflow.nn import FlowSpec, MlpSpec
from avgflow.optim import Adam, clip_by_global_norm
from avgflow.rng import stream
from avgflow.sde_sim import MultiscaleModel, sample_gibbs_solvent, simulate_multiscale, simulate_reduced, \
    solvent_fast_drift

KERNEL = SolventGaussianForce(SolventParams(N=4))
SPEC = FlowSpec(4, 2, 3)


def solvent_data(seed, horizon=1.0):
    p = KERNEL.params
    model = MultiscaleModel(KERNEL, 0.1, solvent_fast_drift(p), np.sqrt(2.0), 100.0)
    y0 = sample_gibbs_solvent(p, 1, seed)[0]
    slow, _ = simulate_multiscale(model, [1.5], y0, horizon, 1e-3, seed)
    return slow.subsample(10)


def test_optimizer_config_validation():
    with pytest.raises(ConfigError):
        OptimizerConfig(lr=0.0)
    with pytest.raises(ConfigError):
        OptimizerConfig(clip=-1.0)
    with pytest.raises(ConfigError, match="B=500.*M0=100|M0=100.*B=500"):
        OptimizerConfig(batch_size=500).check_data(100)


def test_adam_first_step_and_clipping():
    adam = Adam(lr=0.1)
    out = adam.step(np.zeros(3), np.array([1.0, -2.0, 0.0]))
    np.testing.assert_allclose(out, [-0.1, 0.1, 0.0], atol=1e-7)
    g, norm = clip_by_global_norm(np.array([3.0, 4.0]), 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(g, [0.6, 0.8])
    g, _ = clip_by_global_norm(np.array([0.3, 0.4]), 1.0)
    np.testing.assert_array_equal(g, [0.3, 0.4])


def test_minibatch_without_replacement():
    idx = minibatch_index(0, 3, 100, 30)
    assert len(np.unique(idx)) == 30 and np.all(np.diff(idx) > 0)
    np.testing.assert_array_equal(idx, minibatch_index(0, 3, 100, 30))
    np.testing.assert_array_equal(minibatch_index(0, 0, 10, 10), np.arange(10))


def test_zero_iterations_return_initialization():
    traj = solvent_data(0)
    opt = OptimizerConfig(iterations=0, batch_size=50)
    params, hist = fit_penalized_mle(KERNEL, SPEC, traj, 0.1, PenaltyConfig(1e-3, 4.0), 10, opt)
    np.testing.assert_array_equal(params, SPEC.init_params(stream(0, "init-latent-flow")))
    assert hist == []
    mspec = baseline_spec(1, (8,))
    bparams, _ = fit_unstructured_baseline(mspec, traj, 0.1, opt)
    np.testing.assert_array_equal(bparams, mspec.init_params(stream(0, "init-baseline")))


def test_full_batch_objective_equals_full_objective():
    traj = solvent_data(1)
    inc = GaussianIncrements(traj, 0.1)
    z = np.random.default_rng(0).normal(size=(6, 4))
    theta = np.random.default_rng(1).normal(scale=0.2, size=SPEC.n_params)
    pen = PenaltyConfig(1e-3, 4.0)
    sub = inc.subset(np.arange(inc.n))
    a = penalized_objective(KERNEL, SPEC, inc, z, pen)(ad.Tensor(theta)).value
    b = penalized_objective(KERNEL, SPEC, sub, z, pen, inc.n / sub.n)(ad.Tensor(theta)).value
    assert a == b


def test_histories_are_reproducible():
    traj = solvent_data(2)
    opt = OptimizerConfig(iterations=4, batch_size=40, seed=5)
    p1, h1 = fit_penalized_mle(KERNEL, SPEC, traj, 0.1, PenaltyConfig(1e-3, 4.0), 8, opt)
    p2, h2 = fit_penalized_mle(KERNEL, SPEC, traj, 0.1, PenaltyConfig(1e-3, 4.0), 8, opt)
    np.testing.assert_array_equal(p1, p2)
    assert h1 == h2
    assert list(h1[0]) == ["iter", "full_loss", "minibatch_loss", "grad_norm"]


def test_loss_decreases_on_solvent_majority():
    wins = 0
    for seed in range(10):
        traj = solvent_data(seed)
        opt = OptimizerConfig(lr=1e-2, iterations=30, batch_size=100, seed=seed)
        _, hist = fit_penalized_mle(KERNEL, SPEC, traj, 0.1, PenaltyConfig(1e-3, 4.0), 20, opt)
        wins += hist[-1]["full_loss"] <= hist[0]["full_loss"]
    assert wins >= 6


def test_baseline_on_driftless_data_stays_small():
    traj = simulate_reduced(lambda x: 0.0 * x, 0.1, [0.0], 100.0, 0.01, 3)
    opt = OptimizerConfig(lr=1e-2, iterations=200, batch_size=500, seed=3)
    spec = baseline_spec(1, (16, 16))
    params, hist = fit_unstructured_baseline(spec, traj, 0.1, opt)
    grid = np.linspace(-1, 1, 101)[:, None]
    assert np.max(np.abs(baseline_drift(spec, params, grid))) <= 0.5
    assert len(hist) == 200


def test_baseline_gradient_matches_fd():
    from conftest import assert_fd_close, fd_gradient
    traj = simulate_reduced(lambda x: -x, 0.1, [1.0], 0.2, 0.01, 0)
    inc = GaussianIncrements(traj, 0.1)
    spec = MlpSpec((1, 4, 1), "softplus")
    params = np.random.default_rng(0).normal(size=spec.n_params)
    obj = baseline_objective(spec, inc, 1.0)
    _, g = ad.loss_and_gradient(obj, params)
    assert_fd_close(g, fd_gradient(lambda p: float(obj(ad.Tensor(p)).value), params))


def test_non_finite_loss_aborts_with_state():
    traj = solvent_data(0)
    opt = OptimizerConfig(iterations=3, batch_size=20)
    bad = np.full(SPEC.n_params, np.nan)
    with pytest.raises(TrainingAborted) as info, np.errstate(invalid="ignore"):
        fit_penalized_mle(KERNEL, SPEC, traj, 0.1, PenaltyConfig(1e-3, 4.0), 4, opt, init_params=bad)
    assert info.value.iteration == 0


def test_one_dimensional_flow_trains():
    # a 1-d coupling flow has an empty conditioner, so it reduces to an affine map
    from avgflow.kernels import SeparableLinear
    traj = simulate_reduced(lambda x: -0.8 * x, 0.1, [2.0], 2.0, 0.01, 0)
    spec = FlowSpec(1, 2, 3)
    opt = OptimizerConfig(lr=1e-2, iterations=30, batch_size=traj.n_transitions, seed=0)
    params, hist = fit_penalized_mle(SeparableLinear(d=1, coef=-1.0), spec, traj, 0.1, PenaltyConfig(0.0, 2.0),
                                     L=20, opt=opt)
    assert hist[-1]["full_loss"] < hist[0]["full_loss"]
    assert np.all(np.isfinite(params))


def test_quantile_transport_fits_shifted_gaussian():
    target = stream(5, "target").normal(3.0, 0.5, 4000)
    opt = OptimizerConfig(lr=1e-2, iterations=400, batch_size=256, seed=1)
    spec, params, hist = fit_quantile_transport(4, target, n_reference=256, opt=opt)
    out = transport_samples(spec, params, 4000, 2)
    assert hist[-1]["loss"] < 0.05 * hist[0]["loss"]
    assert abs(out.mean() - 3.0) < 0.1 and abs(out.std() - 0.5) < 0.1
