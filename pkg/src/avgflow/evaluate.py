"""Drift MSE on grids, same-noise path comparison and one-dimensional law
comparison (Kolmogorov-Smirnov, Wasserstein-1, Gaussian KDE)."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .rng import child_seed
from .sde_sim import simulate_reduced_batch


@dataclass(frozen=True)
class EvalGrid:
    lower: tuple
    upper: tuple
    points: tuple

    def __post_init__(self):
        lo, hi, n = (tuple(np.atleast_1d(v).tolist()) for v in (self.lower, self.upper, self.points))
        object.__setattr__(self, "lower", tuple(float(v) for v in lo))
        object.__setattr__(self, "upper", tuple(float(v) for v in hi))
        object.__setattr__(self, "points", tuple(int(v) for v in n))
        if not (len(self.lower) == len(self.upper) == len(self.points)):
            raise ConfigError("grid bounds and point counts must have one entry per axis")
        for a, b, k in zip(self.lower, self.upper, self.points):
            if not (np.isfinite(a) and np.isfinite(b) and a < b):
                raise ConfigError(f"invalid grid axis [{a}, {b}]")
            if k < 2:
                raise ConfigError(f"grid axes need at least 2 points, got {k}")

    @classmethod
    def default(cls, d):
        if d == 1:
            return cls((-2.0,), (2.0,), (200,))
        return cls((-2.0,) * d, (2.0,) * d, (50,) * d)

    @property
    def d(self):
        return len(self.points)

    def axes(self):
        return [np.linspace(a, b, k) for a, b, k in zip(self.lower, self.upper, self.points)]

    def flat(self):
        """All grid points as an ``(n_points, d)`` array (first axis varies slowest)."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def to_dict(self):
        return {"lower": list(self.lower), "upper": list(self.upper), "points": list(self.points)}


def _on_grid(f, points):
    return np.asarray(f(points) if callable(f) else f, float).reshape(len(points), -1)


def drift_mse_on_grid(estimated, oracle, grid):
    """Mean over grid points of |estimated(x) - oracle(x)|^2. Either argument may be a callable or an array."""
    points = grid.flat() if isinstance(grid, EvalGrid) else np.asarray(grid, float)
    diff = _on_grid(estimated, points) - _on_grid(oracle, points)
    if not np.all(np.isfinite(diff)):
        raise ConfigError("drift values are not finite on the grid")
    return float(np.mean(np.sum(diff * diff, axis=-1)))


def path_discrepancy(traj_a, traj_b, split_time):
    """Root-mean-square state gap on ``t <= split_time`` and on ``t > split_time``."""
    if traj_a.times.shape != traj_b.times.shape or not np.allclose(traj_a.times, traj_b.times, rtol=0, atol=1e-12):
        raise ConfigError("path_discrepancy needs trajectories on the same time grid")
    gap2 = np.sum((traj_a.states - traj_b.states) ** 2, axis=-1)
    pre = traj_a.times <= split_time
    rms = lambda v: float(np.sqrt(np.mean(v))) if v.size else float("nan")
    return rms(gap2[pre]), rms(gap2[~pre])


def _samples(x):
    x = np.asarray(x, float).ravel()
    if x.size == 0:
        raise ConfigError("empty sample")
    return x


def ks_statistic(samples_a, samples_b):
    """sup_t |F_a(t) - F_b(t)| for the two empirical CDFs (evaluated at every jump point)."""
    a = np.sort(_samples(samples_a))
    b = np.sort(_samples(samples_b))
    t = np.concatenate([a, b])
    fa = np.searchsorted(a, t, side="right") / a.size
    fb = np.searchsorted(b, t, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def wasserstein_1d(samples_a, samples_b):
    """W1 between empirical laws: integral over u in (0, 1) of |F_a^{-1}(u) - F_b^{-1}(u)|.

    Equal sizes reduce to the mean absolute gap of sorted samples. Unequal
    sizes integrate the two step quantile functions exactly over the merged
    breakpoints i/n and j/m.
    """
    a = np.sort(_samples(samples_a))
    b = np.sort(_samples(samples_b))
    n, m = a.size, b.size
    if n == m:
        return float(np.mean(np.abs(a - b)))
    u = np.union1d(np.arange(n + 1) / n, np.arange(m + 1) / m)
    mid = 0.5 * (u[:-1] + u[1:])
    qa = a[np.minimum((mid * n).astype(np.intp), n - 1)]
    qb = b[np.minimum((mid * m).astype(np.intp), m - 1)]
    return float(np.sum(np.abs(qa - qb) * np.diff(u)))


def silverman_bandwidth(samples):
    x = _samples(samples)
    sd = np.std(x, ddof=1) if x.size > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    h = 0.9 * spread * x.size ** (-0.2)
    if not h > 0:
        # degenerate sample (all values equal): fall back to a tiny positive width
        h = 1e-3 * max(1.0, abs(float(x[0])))
    return float(h)


def gaussian_kde(samples, grid, bandwidth=None):
    x = _samples(samples)
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    grid = np.asarray(grid, float)
    out = np.zeros_like(grid)
    for start in range(0, x.size, 2048):
        u = (grid[:, None] - x[None, start:start + 2048]) / h
        out += np.exp(-0.5 * u * u).sum(axis=1)
    return out / (x.size * h * np.sqrt(2.0 * np.pi))


def kde_grid(samples_a, samples_b, min_points=512):
    """Common evaluation grid covering both samples with spacing at most half the smaller bandwidth."""
    a, b = _samples(samples_a), _samples(samples_b)
    h = min(silverman_bandwidth(a), silverman_bandwidth(b))
    lo = min(a.min(), b.min()) - 5.0 * h
    hi = max(a.max(), b.max()) + 5.0 * h
    n = max(min_points, int(np.ceil((hi - lo) / (0.5 * h))) + 1)
    return np.linspace(lo, hi, n)


def trapezoid(y, x):
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x)))


@dataclass
class LawComparison:
    times: np.ndarray
    ks: np.ndarray
    w1: np.ndarray
    kde_x: list
    kde_true: list
    kde_est: list


def law_comparison_report(drift_true, drift_est, sigma, x0, times, L_paths, dt, seed, coordinate=0):
    """Simulate ``L_paths`` path pairs driven by identical noise and compare the time marginals.

    Path ``i`` of both systems uses the stream derived from ``(seed, i)``, so
    equal drifts produce identical path ensembles.
    """
    times = np.atleast_1d(np.asarray(times, float))
    if L_paths < 1:
        raise ConfigError("L_paths must be >= 1")
    horizon = float(times.max())
    steps = int(round(horizon / dt))
    idx = np.rint(times / dt).astype(int)
    if np.any(np.abs(idx * dt - times) > 1e-9 * max(horizon, 1.0)) or np.any(idx < 0):
        raise ConfigError("comparison times must be non-negative multiples of dt")
    seeds = [child_seed(seed, "law-path", i) for i in range(int(L_paths))]
    paths_true = simulate_reduced_batch(drift_true, sigma, x0, steps * dt, dt, seeds)
    if drift_est is drift_true:
        paths_est = paths_true
    else:
        paths_est = simulate_reduced_batch(drift_est, sigma, x0, steps * dt, dt, seeds)
    ks, w1, kx, kt, ke = [], [], [], [], []
    for i in idx:
        a = paths_true[i, :, coordinate]
        b = paths_est[i, :, coordinate]
        ks.append(ks_statistic(a, b))
        w1.append(wasserstein_1d(a, b))
        grid = kde_grid(a, b)
        kx.append(grid)
        kt.append(gaussian_kde(a, grid))
        ke.append(gaussian_kde(b, grid))
    return LawComparison(times, np.array(ks), np.array(w1), kx, kt, ke)


class TabulatedDrift:
    """Piecewise-linear interpolation of a one-dimensional drift table (constant beyond the ends)."""

    def __init__(self, x, values):
        self.x = np.asarray(x, float).ravel()
        self.values = np.asarray(values, float).reshape(len(self.x))
        if np.any(np.diff(self.x) <= 0):
            raise ConfigError("tabulated drift needs increasing abscissae")

    def __call__(self, x):
        x = np.asarray(x, float)
        return np.interp(x, self.x, self.values)
