"""Penalized maximum-likelihood training of the latent flow, and the
unstructured MLP drift baseline."""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .drift_model import GaussianIncrements, PenaltyConfig, latent_draws, penalized_objective
from .errors import ConfigError, NumericError, TrainingAborted
from .nn import MlpSpec, mlp_apply
from .optim import Adam, clip_by_global_norm
from .rng import stream


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    clip: float = 5.0
    iterations: int = 100
    batch_size: int = 500
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not self.clip > 0:
            raise ConfigError(f"clip norm must be positive, got {self.clip}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two numbers in [0, 1), got {self.betas}")

    def check_data(self, n_transitions):
        if self.batch_size > n_transitions:
            raise ConfigError(f"batch size B={self.batch_size} exceeds the number of transitions M0={n_transitions}")

    def adam(self):
        return Adam(lr=self.lr, beta1=self.betas[0], beta2=self.betas[1], eps=self.eps)


def minibatch_index(seed, iteration, n, batch):
    """Sorted uniform sample of ``batch`` transition indices, without replacement."""
    if batch == n:
        return np.arange(n)
    idx = stream(seed, "minibatch", iteration).choice(n, size=batch, replace=False)
    return np.sort(idx)


HISTORY_COLUMNS = ("iter", "full_loss", "minibatch_loss", "grad_norm")


def _train(make_objective, params, inc, opt):
    """Shared first-order loop. ``make_objective(inc_subset, scale, iteration)`` builds the objective."""
    opt.check_data(inc.n)
    params = np.array(params, dtype=np.float64)
    adam = opt.adam()
    history = []
    scale = inc.n / opt.batch_size
    for it in range(opt.iterations):
        idx = minibatch_index(opt.seed, it, inc.n, opt.batch_size)
        try:
            batch_obj = make_objective(inc.subset(idx), scale, it)
            loss, grad = ad.loss_and_gradient(batch_obj, params)
            if opt.batch_size == inc.n:
                full = loss
            else:
                with ad.no_grad():
                    full = float(make_objective(inc, 1.0, it)(ad.Tensor(params)).value)
        except NumericError as exc:
            raise TrainingAborted(f"iteration {it}: {exc}", it, params, history) from exc
        if not (np.isfinite(loss) and np.isfinite(full) and np.all(np.isfinite(grad))):
            raise TrainingAborted(f"non-finite loss at iteration {it}", it, params, history)
        grad, norm = clip_by_global_norm(grad, opt.clip)
        history.append({"iter": it, "full_loss": full, "minibatch_loss": loss, "grad_norm": norm})
        params = adam.step(params, grad)
    return params, history


def fit_penalized_mle(kernel, flow_spec, traj, sigma, penalty=None, L=100, opt=None, init_params=None):
    """Minimize the penalized loss over the latent flow parameters.

    Each iteration draws a fresh minibatch (log-likelihood rescaled by M0/B)
    and fresh latent samples. Returns ``(params, history)``; history rows carry
    the full-data loss at the parameters used in that iteration.
    """
    opt = opt or OptimizerConfig()
    penalty = penalty or PenaltyConfig()
    inc = GaussianIncrements(traj, sigma)
    if init_params is None:
        init_params = flow_spec.init_params(stream(opt.seed, "init-latent-flow"))

    def make_objective(sub, scale, it):
        z = latent_draws(opt.seed, (int(L), flow_spec.dim), it)
        return penalized_objective(kernel, flow_spec, sub, z, penalty, scale)

    return _train(make_objective, init_params, inc, opt)


def baseline_spec(d, hidden=(32, 32), activation="tanh"):
    return MlpSpec((d, *hidden, d), activation)


def baseline_objective(spec, inc, scale):
    def objective(params):
        drift = mlp_apply(spec, params, inc.x)
        return ad.neg(inc.loglik_tensor(drift, scale))
    return objective


def fit_unstructured_baseline(mlp_spec, traj, sigma, opt=None, init_params=None):
    """Fit drift(x) = mlp(x) by Euler-Maruyama maximum likelihood (no kernel, no penalty)."""
    opt = opt or OptimizerConfig()
    inc = GaussianIncrements(traj, sigma)
    if init_params is None:
        init_params = mlp_spec.init_params(stream(opt.seed, "init-baseline"))
    return _train(lambda sub, scale, it: baseline_objective(mlp_spec, sub, scale), init_params, inc, opt)


def baseline_drift(mlp_spec, params, x):
    with ad.no_grad():
        return mlp_apply(mlp_spec, ad.Tensor(params), ad.Tensor(np.asarray(x, float))).value


def fit_quantile_transport(hidden, target, n_reference=512, opt=None, activation="tanh"):
    """Fit a scalar MLP map g with g(z_(i)) ~ target quantiles, z ~ N(0, 1).

    Sorted reference draws are regressed on the matching empirical quantiles of
    ``target``, which is the monotone transport in one dimension. Returns
    ``(spec, params, history)``.
    """
    opt = opt or OptimizerConfig(lr=1e-2, iterations=2000, batch_size=n_reference)
    target = np.sort(np.asarray(target, float).ravel())
    z = np.sort(stream(opt.seed, "transport-reference").standard_normal(n_reference))
    levels = (np.arange(n_reference) + 0.5) / n_reference
    q = np.quantile(target, levels)
    spec = MlpSpec((1, int(hidden), 1), activation)
    params = spec.init_params(stream(opt.seed, "init-transport"))
    zt = ad.Tensor(z[:, None])

    def objective(p):
        return ad.mean(ad.square(ad.sub(mlp_apply(spec, p, zt), q[:, None])))

    adam = opt.adam()
    history = []
    for it in range(opt.iterations):
        loss, grad = ad.loss_and_gradient(objective, params)
        grad, norm = clip_by_global_norm(grad, opt.clip)
        history.append({"iter": it, "loss": loss, "grad_norm": norm})
        params = adam.step(params, grad)
    return spec, params, history


def transport_samples(spec, params, count, seed):
    z = stream(seed, "transport-eval").standard_normal((count, 1))
    return mlp_apply(spec, params, z)[:, 0]
