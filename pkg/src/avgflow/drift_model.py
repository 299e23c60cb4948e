"""Euler-Maruyama likelihood, Monte-Carlo averaged drift under a flow
pushforward, the moment penalty and the penalized loss.

Two evaluation paths exist:

* tape-based (:func:`penalized_loss_and_grad`), used for maximum likelihood
  with a single shared parameter vector;
* a batched grid engine (:func:`mc_drift_grid`, :func:`mc_drift_grid_vjp`)
  that handles K parameter vectors with L latent draws each. It accumulates
  over the latent index one draw at a time, so parameter and latent batch
  sizes only change memory use, never the floating-point result.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericError
from .kernels import (Custom, DoubleWellVariant, DriftKernel, SeparableLinear,  # noqa: F401
                      SeparableQuadratic, SolventGaussianForce, SolventParams, kernel_from_config)
from .nn import CouplingFlow, flow_forward
from .rng import stream
from .sde_sim import sigma_matrix


@dataclass(frozen=True)
class PenaltyConfig:
    lam: float = 1e-3
    p: float = 2.0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"penalty weight must be >= 0, got {self.lam}")
        if not self.p > 1:
            raise ConfigError(f"moment exponent must exceed 1, got {self.p}")

    def check_growth(self, q0):
        """The moment exponent has to dominate the kernel growth: p > q0 + 1."""
        if not self.p > q0 + 1:
            raise ConfigError(f"moment exponent p={self.p} must exceed q0 + 1 = {q0 + 1}")


def default_penalty(kernel):
    if isinstance(kernel, SolventGaussianForce):
        return PenaltyConfig(lam=1e-3, p=4.0)
    return PenaltyConfig(lam=1e-3, p=2.0)


# likelihood -------------------------------------------------------------------

class GaussianIncrements:
    """Precomputed pieces of the Euler-Maruyama transition density for one trajectory."""

    def __init__(self, traj, sigma):
        self.d = traj.d
        s = sigma_matrix(sigma, self.d)
        A = s @ s.T
        eig = np.linalg.eigvalsh(A)
        if not eig.min() > 1e-12 * eig.max():
            raise ConfigError("diffusion matrix sigma sigma^T is singular")
        self.A_inv = np.linalg.inv(A)
        self.logdet_A = float(np.sum(np.log(eig)))
        self.delta = traj.dt if traj.n_transitions > 0 else 1.0
        self.x = traj.states[:-1]
        self.dx = np.diff(traj.states, axis=0)
        self.n = traj.n_transitions
        self.const = -0.5 * self.d * np.log(2.0 * np.pi * self.delta) - 0.5 * self.logdet_A

    def subset(self, index):
        out = object.__new__(GaussianIncrements)
        out.__dict__.update(self.__dict__)
        out.x = self.x[index]
        out.dx = self.dx[index]
        out.n = len(out.x)
        return out

    def residuals(self, drift):
        return self.dx - drift * self.delta

    def loglik(self, drift, scale=1.0):
        """Per-row log-likelihood for drift arrays of shape ``(..., n, d)``."""
        r = self.residuals(np.asarray(drift, float))
        quad = np.sum((r @ self.A_inv) * r, axis=-1)
        return scale * (np.sum(-0.5 * quad / self.delta, axis=-1) + self.n * self.const)

    def loglik_grad(self, drift, scale=1.0):
        """d loglik / d drift, same shape as ``drift``."""
        r = self.residuals(np.asarray(drift, float))
        return scale * (r @ self.A_inv)

    def loglik_tensor(self, drift, scale=1.0):
        r = ad.sub(self.dx, ad.mul(drift, self.delta))
        quad = ad.sum_(ad.mul(ad.matmul(r, self.A_inv), r))
        return ad.mul(ad.add(ad.mul(quad, -0.5 / self.delta), self.n * self.const), scale)


def em_log_likelihood(drift_at_obs, traj, sigma, scale=1.0):
    """Sum over transitions of log N(x_{m+1}; x_m + drift_m * Delta, A * Delta).

    ``drift_at_obs`` holds one row per transition, evaluated at the left
    endpoint. A :class:`~avgflow.autodiff.Tensor` input gives a Tensor result.
    """
    inc = GaussianIncrements(traj, sigma)
    shape = np.shape(drift_at_obs.value if isinstance(drift_at_obs, ad.Tensor) else drift_at_obs)
    if shape[-2:] != (inc.n, inc.d):
        raise ConfigError(f"drift has shape {shape}; expected ({inc.n}, {inc.d}) rows per transition")
    if isinstance(drift_at_obs, ad.Tensor):
        return inc.loglik_tensor(drift_at_obs, scale)
    return float(inc.loglik(drift_at_obs, scale))


# Monte-Carlo drift ------------------------------------------------------------

def latent_draws(seed, shape, *index):
    return stream(seed, "latent", *index).standard_normal(shape)


def mc_drift(kernel, flow, x_points, L, seed):
    """(1/L) sum_l b(x_m, f(Z_l)) with one shared set of latent draws for every point."""
    if L < 1:
        raise ConfigError("L must be >= 1")
    x = np.asarray(x_points, float).reshape(-1, kernel.d)
    z = latent_draws(seed, (int(L), flow.spec.dim))
    y, _ = flow.forward(z)
    vals = kernel.evaluate(x[:, None, :], y[None, :, :])
    if not np.all(np.isfinite(vals)):
        m, l = np.argwhere(~np.isfinite(vals))[0][:2]
        raise NumericError(f"non-finite kernel output at point {m}, latent sample {l}")
    return vals.mean(axis=1)


def moment_penalty(flow, p, L, seed):
    """(1/L) sum_l |f(Z_l)|^p with the same latent draws as :func:`mc_drift`."""
    if L < 1 or not p > 1:
        raise ConfigError("moment penalty needs L >= 1 and p > 1")
    z = latent_draws(seed, (int(L), flow.spec.dim))
    y, _ = flow.forward(z)
    return float(np.mean(np.sum(y * y, axis=-1) ** (p / 2.0)))


def penalized_loss(kernel, flow, traj, sigma, penalty, L, seed):
    drift = mc_drift(kernel, flow, traj.states[:-1], L, seed)
    nll = -em_log_likelihood(drift, traj, sigma)
    if penalty.lam == 0:
        return nll
    return nll + penalty.lam * moment_penalty(flow, penalty.p, L, seed)


def penalized_objective(kernel, spec, inc, z, penalty, scale=1.0):
    """Return ``objective(theta_tensor)`` for the penalized loss on fixed data and latents."""
    def objective(theta):
        y, _ = flow_forward(spec, theta, z)
        vals = kernel.apply(inc.x[:, None, :], ad.reshape(y, (1,) + y.shape))
        drift = ad.mean(vals, axis=1)
        loss = ad.neg(inc.loglik_tensor(drift, scale))
        if penalty.lam > 0:
            sq = ad.sum_(ad.square(y), axis=-1)
            mom = ad.mean(ad.power(sq, penalty.p / 2.0))
            loss = ad.add(loss, ad.mul(mom, penalty.lam))
        return loss
    return objective


def penalized_loss_and_grad(kernel, spec, params, traj, sigma, penalty, L, seed):
    """Value and exact gradient of :func:`penalized_loss` with respect to flow parameters."""
    inc = GaussianIncrements(traj, sigma)
    z = latent_draws(seed, (int(L), spec.dim))
    return ad.loss_and_gradient(penalized_objective(kernel, spec, inc, z, penalty), params)


def flow_drift(kernel, spec, params, x_points, z):
    """Averaged drift at ``x_points`` for one flow and explicit latent draws ``z``."""
    x = np.asarray(x_points, float).reshape(-1, kernel.d)
    y, _ = flow_forward(spec, params, z)
    out = np.zeros((len(x), kernel.d))
    for l in range(len(y)):
        out += kernel.evaluate(x, y[l])
    return out / len(y)


# batched grid engine ----------------------------------------------------------

def _batches(n, size):
    size = max(1, int(size))
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def mc_drift_grid(kernel, spec, thetas, z, x, param_batch=20, latent_batch=25):
    """Averaged drift for many flows: ``out[k, m] = (1/L) sum_l b(x_m, f_{theta_k}(z[k, l]))``.

    ``thetas`` is ``(K, P)``, ``z`` is ``(K, L, D)`` and ``x`` is ``(M, d)``.
    """
    thetas = np.asarray(thetas, float)
    K, L = z.shape[0], z.shape[1]
    x = np.asarray(x, float).reshape(-1, kernel.d)
    out = np.empty((K, len(x), kernel.d))
    with ad.no_grad():
        for kb in _batches(K, param_batch):
            acc = np.zeros((kb.stop - kb.start, len(x), kernel.d))
            for lb in _batches(L, latent_batch):
                y, _ = flow_forward(spec, thetas[kb, None, :], z[kb, lb])
                vals = kernel.evaluate(x[None, :, None, :], y[:, None, :, :])
                if not np.all(np.isfinite(vals)):
                    k, m, l = np.argwhere(~np.isfinite(vals))[0][:3]
                    raise NumericError(f"non-finite kernel output at parameter sample {kb.start + k}, "
                                       f"point {m}, latent sample {lb.start + l}")
                for j in range(vals.shape[2]):
                    acc += vals[:, :, j]
            out[kb] = acc / L
    return out


def mc_drift_grid_value_and_grad(kernel, spec, thetas, z, x, cotangent_fn, param_batch=20, latent_batch=25):
    """Drift grid plus the pullback of a drift-dependent cotangent, in one pass.

    ``cotangent_fn(drift_block, k_slice)`` maps the finished drift rows of one
    parameter batch to their cotangent. Kernel intermediates and flow tapes of
    the forward pass are reused by the backward pass, so each parameter batch
    is pushed through the flow and the kernel only once.
    Returns ``(drift, grad)`` with ``drift`` as in :func:`mc_drift_grid` and
    ``grad`` shaped like ``thetas``.
    """
    thetas = np.asarray(thetas, float)
    K, L = z.shape[0], z.shape[1]
    P = thetas.shape[1]
    x = np.asarray(x, float).reshape(-1, kernel.d)
    drift = np.empty((K, len(x), kernel.d))
    grad = np.empty_like(thetas)
    xb = x[None, :, None, :]
    for kb in _batches(K, param_batch):
        kn = kb.stop - kb.start
        acc = np.zeros((kn, len(x), kernel.d))
        saved = []
        for lb in _batches(L, latent_batch):
            ln = lb.stop - lb.start
            leaf = ad.Tensor(np.broadcast_to(thetas[kb, None, :], (kn, ln, P)).copy(), requires_grad=True)
            y, _ = flow_forward(spec, leaf, z[kb, lb])
            vals, pullback = kernel.evaluate_with_pullback(xb, y.value[:, None, :, :])
            if not np.all(np.isfinite(vals)):
                k, m, l = np.argwhere(~np.isfinite(vals))[0][:3]
                raise NumericError(f"non-finite kernel output at parameter sample {kb.start + k}, "
                                   f"point {m}, latent sample {lb.start + l}")
            for j in range(ln):
                acc += vals[:, :, j]
            saved.append((leaf, y, pullback))
        drift[kb] = acc / L
        g_k = np.asarray(cotangent_fn(drift[kb], kb), float)[:, :, None, :] / L
        gacc = np.zeros((kn, P))
        for leaf, y, pullback in saved:
            gy = pullback(g_k).sum(axis=1)
            (g_leaf,) = ad.gradients(y, [leaf], seed=gy)
            for j in range(g_leaf.shape[1]):
                gacc += g_leaf[:, j]
        grad[kb] = gacc
    return drift, grad


def mc_drift_grid_vjp(kernel, spec, thetas, z, x, cotangent, param_batch=20, latent_batch=25):
    """Gradient of ``sum_{k,m} cotangent[k, m] . out[k, m]`` with respect to each ``thetas[k]``.

    Returns an array shaped like ``thetas``. Uses the reparameterization
    chain rule: kernel VJP in y, then reverse mode through the flow.
    """
    thetas = np.asarray(thetas, float)
    K, L = z.shape[0], z.shape[1]
    x = np.asarray(x, float).reshape(-1, kernel.d)
    cot = np.asarray(cotangent, float)
    grad = np.empty_like(thetas)
    for kb in _batches(K, param_batch):
        kn = kb.stop - kb.start
        acc = np.zeros((kn, thetas.shape[1]))
        g_k = cot[kb][:, :, None, :] / L
        for lb in _batches(L, latent_batch):
            ln = lb.stop - lb.start
            leaf = ad.Tensor(np.broadcast_to(thetas[kb, None, :], (kn, ln, thetas.shape[1])).copy(),
                             requires_grad=True)
            y, _ = flow_forward(spec, leaf, z[kb, lb])
            gy = kernel.vjp_y(x[None, :, None, :], y.value[:, None, :, :], g_k).sum(axis=1)
            (g_leaf,) = ad.gradients(y, [leaf], seed=gy)
            for j in range(ln):
                acc += g_leaf[:, j]
        grad[kb] = acc
    return grad
