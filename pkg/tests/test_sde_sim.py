import numpy as np
import pytest

from avgflow.errors import ConfigError, DivergenceError, NumericError
from avgflow.kernels import Custom, SeparableLinear, SeparableQuadratic, SolventGaussianForce, SolventParams
from avgflow.sde_sim import (MultiscaleModel, Trajectory, averaged_drift_oracle, averaged_drift_on_grid,
                             empirical_time_average, sample_gibbs_solvent, sample_von_mises_fast,
                             simulate_multiscale, simulate_reduced, simulate_reduced_batch,
                             solvent_covariance)

ZERO = SeparableLinear(d=1, b0="constant", coef=0.0)
MINUS_X = SeparableLinear(d=1, b0="linear", coef=-1.0)   # b(x, y) = -x * y


def ou_model(kernel=ZERO, sigma=0.0, n=1000.0):
    return MultiscaleModel(kernel, sigma, lambda y: -y, np.sqrt(2.0), n)


def batch_se(values, blocks=40):
    chunks = np.array_split(values, blocks)
    means = np.array([c.mean() for c in chunks])
    return means.std(ddof=1) / np.sqrt(blocks)


def test_trajectory_validation():
    with pytest.raises(ConfigError):
        Trajectory([0.0, 0.1, 0.3], np.zeros(3))
    with pytest.raises(ConfigError):
        Trajectory([0.0, 0.1], [0.0, np.nan])
    with pytest.raises(ConfigError):
        Trajectory([0.0, 0.1], np.zeros(3))
    t = Trajectory(0.01 * np.arange(501), np.zeros(501))
    assert t.n_transitions == 500 and t.dt == pytest.approx(0.01)


def test_trajectory_csv_round_trip(tmp_path):
    r = np.random.default_rng(0)
    t = Trajectory(0.1 * np.arange(11), r.normal(size=(11, 2)))
    t.to_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "t,x_0,x_1"
    back = Trajectory.from_csv(tmp_path / "t.csv")
    np.testing.assert_array_equal(back.times, t.times)
    np.testing.assert_array_equal(back.states, t.states)


def test_zero_dynamics_keep_state():
    slow, _ = simulate_multiscale(ou_model(n=10.0), [1.0], [0.0], 1.0, 1e-3, 0)
    np.testing.assert_array_equal(slow.states, np.ones((1001, 1)))


def test_linear_decay_endpoint():
    # fast state pinned at 1 (no fast noise, zero fast drift) so b(x, y) = -x
    model = MultiscaleModel(MINUS_X, 0.0, lambda y: 0.0 * y, 0.0, 1.0)
    slow, _ = simulate_multiscale(model, [1.0], [1.0], 1.0, 1e-3, 0)
    assert abs(slow.states[-1, 0] - np.exp(-1)) < 1e-2
    red = simulate_reduced(lambda x: -x, 0.0, [1.0], 1.0, 1e-3, 0)
    assert abs(red.states[-1, 0] - np.exp(-1)) < 1e-2


def test_ou_fast_variance_and_time_average():
    _, fast = simulate_multiscale(ou_model(), [0.0], [0.0], 5.0, 1e-5, 4)
    window = fast.states[fast.times >= 1.0, 0]
    se = batch_se(window ** 2)
    assert abs(np.mean(window ** 2) - 1.0) < 3 * se + 0.01
    tail = Trajectory(fast.times[fast.times >= 1.0], fast.states[fast.times >= 1.0])
    assert abs(empirical_time_average(tail, lambda y: y[:, 0] ** 2) - 1.0) < 3 * se + 0.01
    assert abs(empirical_time_average(tail, lambda y: y[:, 0])) < 3 * batch_se(window)
    assert empirical_time_average(fast, lambda y: np.ones(len(y))) == 1.0


def test_stability_guard_and_divergence():
    with pytest.raises(ConfigError, match="stability"):
        simulate_multiscale(ou_model(n=1000.0), [0.0], [0.0], 1.0, 1e-3, 0)
    with pytest.raises(DivergenceError) as info, np.errstate(over="ignore", invalid="ignore"):
        simulate_reduced(lambda x: x ** 3, 0.0, [10.0], 1.0, 0.1, 0)
    assert info.value.step >= 1
    with pytest.raises(ConfigError):
        simulate_reduced(lambda x: x, 0.1, [0.0], 1.0, 0.3, 0)


def test_reduced_determinism_and_shared_slow_noise():
    a = simulate_reduced(lambda x: -x, 0.3, [0.5], 1.0, 1e-3, 9)
    b = simulate_reduced(lambda x: -x, 0.3, [0.5], 1.0, 1e-3, 9)
    np.testing.assert_array_equal(a.states, b.states)
    slow, _ = simulate_multiscale(ou_model(sigma=0.3, n=10.0), [0.5], [0.0], 1.0, 1e-3, 9)
    free = simulate_reduced(lambda x: 0.0 * x, 0.3, [0.5], 1.0, 1e-3, 9)
    np.testing.assert_array_equal(np.diff(slow.states, axis=0), np.diff(free.states, axis=0))


def test_batch_rows_equal_single_paths():
    seeds = [3, 17, 5]
    batch = simulate_reduced_batch(lambda x: -x, 0.2, [1.0], 0.5, 0.01, seeds)
    for i, s in enumerate(seeds):
        single = simulate_reduced(lambda x: -x, 0.2, [1.0], 0.5, 0.01, s)
        np.testing.assert_array_equal(batch[:, i], single.states)


def test_gibbs_standard_normal_case():
    s = sample_gibbs_solvent(SolventParams(N=1, d=1, a=1e-12, kappa=1.0, gamma=1.0), 100_000, 0)
    assert abs(s.var() - 1.0) < 0.05


def test_gibbs_two_particle_covariance():
    p = SolventParams(N=2, d=1, a=1.0, kappa=1.0, gamma=1.0)
    cov = solvent_covariance(p)
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(cov)), [1 / 3, 1.0], rtol=1e-12)
    s = sample_gibbs_solvent(p, 100_000, 1)
    emp = np.cov(s.T)
    assert np.linalg.norm(emp - cov) <= 0.05 * np.linalg.norm(cov)
    se = s.std(axis=0) / np.sqrt(len(s))
    assert np.all(np.abs(s.mean(axis=0)) < 3 * se)


def test_gibbs_covariance_error_within_jackknife_bound():
    p = SolventParams(N=3, d=2, a=0.5, kappa=2.0, gamma=0.7)
    cov = solvent_covariance(p)
    s = sample_gibbs_solvent(p, 100_000, 2)
    err = np.linalg.norm(s.T @ s / len(s) - cov)
    groups = np.array_split(s, 20)
    loo = []
    for g in range(20):
        rest = np.concatenate([groups[j] for j in range(20) if j != g])
        loo.append(rest.T @ rest / len(rest))
    loo = np.array(loo)
    jack_var = 19 / 20 * np.sum((loo - loo.mean(axis=0)) ** 2)
    assert err < 4 * np.sqrt(jack_var)


def test_von_mises_uniform_and_concentrated():
    u = sample_von_mises_fast(np.zeros(4), np.zeros(4), 100_000, 0)
    assert u.min() >= -np.pi and u.max() < np.pi
    np.testing.assert_allclose(u.var(axis=0), np.pi ** 2 / 3, rtol=0.02)
    c = sample_von_mises_fast(np.full(4, 100.0), np.zeros(4), 100_000, 1)
    assert np.all(np.abs(c.mean(axis=0)) < 0.02)
    np.testing.assert_allclose(c.var(axis=0), 0.01, rtol=0.2)
    with pytest.raises(ConfigError):
        sample_von_mises_fast([-1.0, 0, 0, 0], np.zeros(4), 10, 0)


def test_oracle_examples():
    g = np.random.default_rng(0).standard_normal((1_000_000, 1))
    odd = averaged_drift_oracle(SeparableLinear(d=1, coef=1.0), [1.0], g)
    assert abs(odd[0]) < 3 / np.sqrt(len(g))
    sq = averaged_drift_oracle(SeparableQuadratic(d=1, coef=1.0), [2.0], g)
    assert abs(sq[0] - 2.0) < 0.02
    p = SolventParams()
    ys = sample_gibbs_solvent(p, 200_000, 5)
    k = SolventGaussianForce(p)
    vals = k.evaluate(np.zeros(1), ys)
    assert abs(averaged_drift_oracle(k, [0.0], ys)[0]) < 3 * vals.std() / np.sqrt(len(ys))
    grid = np.array([[-1.0], [0.0], [0.5]])
    np.testing.assert_allclose(averaged_drift_on_grid(k, grid, ys),
                               np.stack([averaged_drift_oracle(k, x, ys) for x in grid]), rtol=1e-12)


def test_oracle_reports_bad_sample_index():
    k = Custom("(/ x0 y0)", d_fast=1)
    samples = np.ones((10, 1))
    samples[7] = 0.0
    with pytest.raises(NumericError, match="7"), np.errstate(divide="ignore"):
        averaged_drift_oracle(k, [1.0], samples)
