"""Euler-Maruyama simulation of slow/fast systems, exact invariant-law samplers
and the brute-force averaged-drift oracle."""

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, DivergenceError, NumericError
from .kernels import DriftKernel, SolventParams
from .rng import stream

STABILITY_LIMIT = 0.1


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        states = np.asarray(self.states, dtype=np.float64)
        if states.ndim == 1:
            states = states[:, None]
        self.states = states
        if self.times.ndim != 1 or len(self.times) == 0:
            raise ConfigError("trajectory needs a non-empty 1-d time grid")
        if len(states) != len(self.times):
            raise ConfigError(f"{len(states)} states for {len(self.times)} times")
        if not np.all(np.isfinite(states)) or not np.all(np.isfinite(self.times)):
            raise ConfigError("trajectory contains non-finite entries")
        if len(self.times) > 1:
            steps = np.diff(self.times)
            if np.any(steps <= 0):
                raise ConfigError("trajectory times must be strictly increasing")
            dt = (self.times[-1] - self.times[0]) / (len(self.times) - 1)
            # relative tolerance on the spacing plus a few ulps of the largest time stamp
            tol = 1e-12 * dt + 8.0 * np.spacing(np.max(np.abs(self.times)))
            if np.max(np.abs(steps - dt)) > tol:
                raise ConfigError("trajectory times are not uniformly spaced")

    @property
    def d(self):
        return self.states.shape[1]

    @property
    def n_transitions(self):
        return len(self.times) - 1

    @property
    def dt(self):
        if len(self.times) < 2:
            raise ConfigError("a single-point trajectory has no spacing")
        return (self.times[-1] - self.times[0]) / (len(self.times) - 1)

    @property
    def horizon(self):
        return self.times[-1] - self.times[0]

    def subsample(self, every):
        every = int(every)
        if every < 1:
            raise ConfigError("subsampling stride must be >= 1")
        return Trajectory(self.times[::every], self.states[::every])

    def window(self, t_max):
        keep = self.times <= t_max + 1e-12 * max(1.0, abs(t_max))
        return Trajectory(self.times[keep], self.states[keep])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t"] + [f"x_{i}" for i in range(self.d)])
            for t, row in zip(self.times, self.states):
                writer.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in row])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if not header or header[0] != "t":
            raise ConfigError(f"{path}: trajectory CSV must start with a 't' column")
        data = np.array([[float(v) for v in r] for r in body], dtype=np.float64).reshape(len(body), len(header))
        return cls(data[:, 0], data[:, 1:])


@dataclass
class MultiscaleModel:
    """Slow state driven by ``kernel``; fast state follows dY = n beta(Y) dt + sqrt(n) alpha dW.

    ``fast_drift`` maps an ``(..., d_fast)`` array to the same shape.
    ``fast_diffusion`` is a positive scalar multiplying the identity.
    With ``fast_wrap`` the fast state lives on the torus [-pi, pi)^d_fast.
    """

    kernel: DriftKernel
    sigma: object
    fast_drift: Callable
    fast_diffusion: float = np.sqrt(2.0)
    n_scale: float = 1.0
    fast_wrap: bool = False

    def __post_init__(self):
        if self.n_scale < 1:
            raise ConfigError(f"n_scale must be >= 1, got {self.n_scale}")
        self.sigma_matrix = sigma_matrix(self.sigma, self.d)
        if not self.fast_diffusion >= 0:
            raise ConfigError("fast diffusion must be non-negative")

    @property
    def d(self):
        return self.kernel.d

    @property
    def d_fast(self):
        return self.kernel.d_fast


def sigma_matrix(sigma, d, allow_zero=True):
    """Normalize a scalar or matrix diffusion to a d x d array."""
    s = np.asarray(sigma, dtype=np.float64)
    if s.ndim == 0:
        if s < 0 or (s == 0 and not allow_zero):
            raise ConfigError(f"sigma must be positive, got {float(s)}")
        return float(s) * np.eye(d)
    if s.shape != (d, d):
        raise ConfigError(f"sigma must be a scalar or {d}x{d} matrix, got shape {s.shape}")
    if not allow_zero:
        try:
            np.linalg.cholesky(s @ s.T)
        except np.linalg.LinAlgError:
            raise ConfigError("sigma sigma^T is not positive definite") from None
    return s


def wrap_angle(y):
    """Map angles to [-pi, pi)."""
    return np.mod(np.asarray(y) + np.pi, 2.0 * np.pi) - np.pi


def solvent_fast_drift(params):
    """Gradient drift -gamma * grad U for the quadratic solvent potential."""
    N, d = params.N, params.d
    c = params.a * N + params.kappa

    def beta(y):
        ys = np.asarray(y, float).reshape(np.shape(y)[:-1] + (N, d))
        grad = c * ys - params.a * ys.sum(axis=-2, keepdims=True)
        return -params.gamma * grad.reshape(np.shape(y))

    return beta


def von_mises_fast_drift(concentration, locations):
    """Langevin drift whose invariant law is the product von Mises law (with alpha = sqrt(2))."""
    kappa = np.asarray(concentration, float)
    mu = np.asarray(locations, float)

    def beta(y):
        return -kappa * np.sin(np.asarray(y, float) - mu)

    return beta


def _n_steps(horizon, dt):
    if not dt > 0:
        raise ConfigError(f"dt must be positive, got {dt}")
    if not horizon > 0:
        raise ConfigError(f"horizon must be positive, got {horizon}")
    steps = int(round(horizon / dt))
    if steps < 1 or abs(steps * dt - horizon) > 1e-9 * horizon:
        raise ConfigError(f"horizon {horizon} is not an integer multiple of dt {dt}")
    return steps


def _slow_noise(seed, steps, d):
    return stream(seed, "slow-noise").standard_normal((steps, d))


def simulate_multiscale(model, x0, y0, horizon, dt, seed):
    """Joint Euler-Maruyama integration of the slow and fast components.

    Slow and fast Brownian increments come from separate streams, so the slow
    increments match :func:`simulate_reduced` called with the same seed.
    """
    steps = _n_steps(horizon, dt)
    if dt * model.n_scale > STABILITY_LIMIT:
        raise ConfigError(f"dt * n_scale = {dt * model.n_scale:g} exceeds the stability limit {STABILITY_LIMIT}")
    d, d_fast = model.d, model.d_fast
    x = np.asarray(x0, float).reshape(d).copy()
    y = np.asarray(y0, float).reshape(d_fast).copy()
    xi = _slow_noise(seed, steps, d)
    eta = stream(seed, "fast-noise").standard_normal((steps, d_fast))
    xs = np.empty((steps + 1, d))
    ys = np.empty((steps + 1, d_fast))
    xs[0], ys[0] = x, y
    sq = np.sqrt(dt)
    slow_noise = xi @ model.sigma_matrix.T * sq
    fast_scale = np.sqrt(model.n_scale) * model.fast_diffusion * sq
    n_dt = model.n_scale * dt
    kernel, beta = model.kernel, model.fast_drift
    for m in range(steps):
        x_next = x + kernel.evaluate(x, y) * dt + slow_noise[m]
        y = y + beta(y) * n_dt + fast_scale * eta[m]
        if model.fast_wrap:
            y = wrap_angle(y)
        x = x_next
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DivergenceError(f"simulation diverged at step {m + 1}", m + 1)
        xs[m + 1], ys[m + 1] = x, y
    times = dt * np.arange(steps + 1)
    return Trajectory(times, xs), Trajectory(times, ys)


def simulate_reduced(drift, sigma, x0, horizon, dt, seed):
    """Euler-Maruyama for dX = drift(X) dt + sigma dW using the slow-noise stream of ``seed``."""
    steps = _n_steps(horizon, dt)
    x = np.atleast_1d(np.asarray(x0, float)).copy()
    d = x.shape[0]
    sig = sigma_matrix(sigma, d)
    noise = _slow_noise(seed, steps, d) @ sig.T * np.sqrt(dt)
    xs = np.empty((steps + 1, d))
    xs[0] = x
    for m in range(steps):
        x = x + np.asarray(drift(x), float).reshape(d) * dt + noise[m]
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"simulation diverged at step {m + 1}", m + 1)
        xs[m + 1] = x
    return Trajectory(dt * np.arange(steps + 1), xs)


def simulate_reduced_batch(drift, sigma, x0, horizon, dt, seeds, tag="slow-noise"):
    """Vectorized :func:`simulate_reduced` over many seeds; row ``i`` equals the single-seed path.

    ``drift`` must accept an ``(n_paths, d)`` array. Returns states of shape
    ``(steps + 1, n_paths, d)``.
    """
    steps = _n_steps(horizon, dt)
    x0 = np.atleast_1d(np.asarray(x0, float))
    d = x0.shape[0]
    sig = sigma_matrix(sigma, d)
    seeds = list(seeds)
    noise = np.stack([stream(s, tag).standard_normal((steps, d)) for s in seeds], axis=1)
    noise = noise @ sig.T * np.sqrt(dt)
    x = np.broadcast_to(x0, (len(seeds), d)).copy()
    out = np.empty((steps + 1, len(seeds), d))
    out[0] = x
    for m in range(steps):
        x = x + np.asarray(drift(x), float).reshape(x.shape) * dt + noise[m]
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"simulation diverged at step {m + 1}", m + 1)
        out[m + 1] = x
    return out


def solvent_covariance(params):
    """Analytic covariance of the solvent Gibbs law, (N*d) x (N*d), particle-major."""
    N = params.N
    lam_mean, lam_perp = params.precision_eigenvalues
    J = np.full((N, N), 1.0 / N)
    P = np.eye(N) - J
    return np.kron(P / lam_perp + J / lam_mean, np.eye(params.d))


def sample_gibbs_solvent(params, count, seed):
    """Exact i.i.d. samples from the solvent Gibbs law via its eigen-decomposition."""
    count = int(count)
    if count < 1:
        raise ConfigError("count must be >= 1")
    lam_mean, lam_perp = params.precision_eigenvalues
    if not (lam_mean > 0 and lam_perp > 0):
        raise NumericError("Gibbs precision is not positive definite")
    g = stream(seed, "gibbs").standard_normal((count, params.N, params.d))
    g_mean = g.mean(axis=1, keepdims=True)
    y = (g - g_mean) / np.sqrt(lam_perp) + np.broadcast_to(g_mean, g.shape) / np.sqrt(lam_mean)
    return y.reshape(count, params.N * params.d)


def sample_von_mises_fast(concentration, locations, count, seed):
    """Independent von Mises coordinates, wrapped into [-pi, pi)."""
    kappa = np.asarray(concentration, float)
    mu = np.broadcast_to(np.asarray(locations, float), kappa.shape)
    if np.any(kappa < 0):
        raise ConfigError(f"von Mises concentrations must be non-negative, got {kappa.tolist()}")
    rng = stream(seed, "von-mises")
    samples = rng.vonmises(mu, kappa, size=(int(count),) + kappa.shape)
    return wrap_angle(samples)


def averaged_drift_oracle(kernel, x, invariant_samples, chunk=100_000):
    """Sample mean of b(x, y_l) over the supplied invariant samples."""
    samples = np.asarray(invariant_samples, float)
    if samples.ndim != 2 or len(samples) == 0:
        raise ConfigError("invariant_samples must be a non-empty 2-d array")
    x = np.asarray(x, float).reshape(kernel.d)
    total = np.zeros(kernel.d)
    for start in range(0, len(samples), chunk):
        vals = kernel.evaluate(x, samples[start:start + chunk])
        bad = ~np.all(np.isfinite(vals), axis=-1)
        if np.any(bad):
            idx = start + int(np.argmax(bad))
            raise NumericError(f"kernel evaluation is non-finite at invariant sample {idx}")
        total += vals.sum(axis=0)
    return total / len(samples)


def averaged_drift_on_grid(kernel, points, invariant_samples, chunk=20_000):
    """:func:`averaged_drift_oracle` at every row of ``points`` (shape ``(G, d)``)."""
    points = np.asarray(points, float).reshape(-1, kernel.d)
    samples = np.asarray(invariant_samples, float)
    total = np.zeros((len(points), kernel.d))
    for start in range(0, len(samples), chunk):
        block = samples[start:start + chunk]
        vals = kernel.evaluate(points[:, None, :], block[None, :, :])
        if not np.all(np.isfinite(vals)):
            raise NumericError(f"kernel evaluation is non-finite in sample block starting at {start}")
        total += vals.sum(axis=1)
    return total / len(samples)


def empirical_time_average(fast, f):
    """Left-endpoint Riemann average (1/T) sum f(Y_m) dt.

    ``f`` is vectorized: it maps an ``(M, d_fast)`` array to ``M`` values (or ``M`` rows).
    """
    states = fast.states
    if len(states) == 0:
        raise ConfigError("empty trajectory")
    if len(states) == 1:
        return np.asarray(f(states), float).mean(axis=0)
    vals = np.asarray(f(states[:-1]), float)
    return vals.sum(axis=0) / (len(states) - 1)
