import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fd_gradient(f, x, h=1e-5):
    """Central finite differences of a scalar function of a flat vector."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def assert_fd_close(grad, fd, rel=1e-4, floor=1e-6):
    grad, fd = np.asarray(grad), np.asarray(fd)
    mask = np.abs(fd) > floor
    err = np.abs(grad[mask] - fd[mask]) / np.maximum(np.abs(fd[mask]), 1e-12)
    assert err.size == 0 or err.max() <= rel, f"max relative error {err.max():.3g}"
    assert np.all(np.abs(grad[~mask]) < 10 * floor + rel)
