"""Flow-based variational inference over the latent flow's parameters.

A second coupling flow ``g`` maps standard-normal noise xi to parameter
vectors theta = g(xi) of the latent flow. The ELBO is estimated with K
parameter draws, each using L latent draws for the Monte-Carlo drift, and the
KL term is estimated from the same theta draws.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .drift_model import GaussianIncrements, mc_drift_grid, mc_drift_grid_value_and_grad
from .errors import ConfigError, NumericError, TrainingAborted
from .mle_train import OptimizerConfig, minibatch_index
from .nn import FlowSpec, flow_forward, standard_normal_logpdf
from .optim import Adam, clip_by_global_norm
from .rng import stream


@dataclass(frozen=True)
class VIConfig:
    K: int = 100
    L: int = 100
    prior_scale: float = 1.0
    posterior_layers: int = 6
    posterior_hidden: int = 256
    activation: str = "tanh"
    param_batch: int = 20
    latent_batch: int = 25
    init_scale: float = 0.05

    def __post_init__(self):
        if not 0 < self.init_scale <= 1:
            raise ConfigError(f"posterior init scale must lie in (0, 1], got {self.init_scale}")
        if self.K < 1 or self.L < 1:
            raise ConfigError(f"K and L must be >= 1, got K={self.K}, L={self.L}")
        if not self.prior_scale > 0:
            raise ConfigError(f"prior scale must be positive, got {self.prior_scale}")
        if self.param_batch < 1 or self.latent_batch < 1:
            raise ConfigError("evaluation batch sizes must be >= 1")


@dataclass
class VariationalState:
    latent_spec: FlowSpec
    posterior_spec: FlowSpec
    params: np.ndarray
    prior_scale: float = 1.0
    K: int = 100
    L: int = 100
    param_batch: int = 20
    latent_batch: int = 25
    optimizer: Adam = None
    seed: int = 0

    def __post_init__(self):
        if self.posterior_spec.dim != self.latent_spec.n_params:
            raise ConfigError(f"posterior flow dimension {self.posterior_spec.dim} does not match "
                              f"latent flow parameter count {self.latent_spec.n_params}")
        self.params = np.asarray(self.params, dtype=np.float64)

    @classmethod
    def create(cls, latent_spec, config=None, seed=0, params=None):
        config = config or VIConfig()
        post = FlowSpec(latent_spec.n_params, config.posterior_layers, config.posterior_hidden,
                        config.activation)
        if params is None:
            params = post.init_params(stream(seed, "init-posterior-flow"))
            if config.init_scale != 1.0:
                center = latent_spec.init_params(stream(seed, "init-latent-flow"))
                params = post.affine_init(params, center, np.log(config.init_scale))
        return cls(latent_spec, post, params, config.prior_scale, config.K, config.L,
                   config.param_batch, config.latent_batch, None, seed)

    def log_prior(self, theta):
        s = self.prior_scale
        dim = theta.shape[-1]
        return (-0.5 * np.sum(theta * theta, axis=-1) / s ** 2
                - dim * np.log(s) - 0.5 * dim * np.log(2.0 * np.pi))


def _xi(state, K, seed, *index):
    return stream(seed, "posterior-noise", *index).standard_normal((int(K), state.posterior_spec.dim))


def sample_parameters(state, K, seed, *index):
    """Draw theta_k = g(xi_k) and log q(theta_k) = log N(xi_k) - logdet_k."""
    if K < 1:
        raise ConfigError("K must be >= 1")
    xi = _xi(state, K, seed, *index)
    theta, logdet = flow_forward(state.posterior_spec, state.params, xi)
    return theta, standard_normal_logpdf(xi) - logdet


def kl_estimate(state, theta_samples, log_q):
    """Monte-Carlo estimate (1/K) sum_k [log q(theta_k) - log p(theta_k)]."""
    return float(np.mean(np.asarray(log_q) - state.log_prior(np.asarray(theta_samples))))


def _loglik_terms(state, kernel, inc, theta, z, scale):
    if inc.n == 0:
        return np.zeros(len(theta)), None
    drift = mc_drift_grid(kernel, state.latent_spec, theta, z, inc.x, state.param_batch, state.latent_batch)
    return inc.loglik(drift, scale), drift


def elbo_estimate(state, kernel, traj, sigma, seed, index=None, return_terms=False):
    """(1/K) sum_k loglik(theta_k) - KL, with the likelihood rescaled by M0/B when ``index`` selects a minibatch."""
    inc = GaussianIncrements(traj, sigma)
    scale = 1.0
    if index is not None:
        scale = inc.n / len(index)
        inc = inc.subset(index)
    theta, log_q = sample_parameters(state, state.K, seed)
    z = stream(seed, "latent").standard_normal((state.K, state.L, state.latent_spec.dim))
    ll, _ = _loglik_terms(state, kernel, inc, theta, z, scale)
    kl = kl_estimate(state, theta, log_q)
    elbo = float(np.mean(ll)) - kl
    if return_terms:
        return elbo, float(np.mean(ll)), kl
    return elbo


def elbo_and_grad(state, kernel, inc, scale, xi, z, params=None):
    """ELBO value, its terms and the exact gradient with respect to the posterior flow parameters.

    The likelihood gradient with respect to each theta_k comes from the
    batched drift engine and is pulled back through ``g`` together with the
    KL term in one reverse pass.
    """
    params = state.params if params is None else params
    K = xi.shape[0]
    leaf = ad.Tensor(params, requires_grad=True)
    theta_t, logdet = flow_forward(state.posterior_spec, leaf, xi)
    theta = theta_t.value
    if inc.n == 0:
        ll, dll = np.zeros(K), np.zeros_like(theta)
    else:
        drift, dll = mc_drift_grid_value_and_grad(
            kernel, state.latent_spec, theta, z, inc.x,
            lambda block, kb: inc.loglik_grad(block, scale),
            state.param_batch, state.latent_batch)
        ll = inc.loglik(drift, scale)
    log_q = standard_normal_logpdf(xi) - logdet.value
    kl = kl_estimate(state, theta, log_q)
    # surrogate whose gradient equals the ELBO gradient
    s2 = state.prior_scale ** 2
    kl_t = ad.mean(ad.add(ad.neg(logdet), ad.mul(ad.sum_(ad.square(theta_t), axis=-1), 0.5 / s2)))
    surrogate = ad.sub(ad.mul(ad.sum_(ad.mul(theta_t, dll)), 1.0 / K), kl_t)
    (grad,) = ad.gradients(surrogate, [leaf])
    loglik_term = float(np.mean(ll))
    return loglik_term - kl, loglik_term, kl, grad


ELBO_COLUMNS = ("iter", "elbo", "loglik_term", "kl_term", "grad_norm")


def run_vi(kernel, latent_spec, traj, sigma, config=None, opt=None, state=None):
    """Stochastic ELBO ascent with fresh minibatch, xi and latent draws every iteration.

    Returns ``(state, history)``; the history row for iteration ``i`` holds the
    ELBO estimate at the parameters before that iteration's update.
    """
    config = config or VIConfig()
    opt = opt or OptimizerConfig()
    if state is None:
        state = VariationalState.create(latent_spec, config, seed=opt.seed)
    inc_full = GaussianIncrements(traj, sigma)
    opt.check_data(inc_full.n)
    scale = inc_full.n / opt.batch_size
    if state.optimizer is None:
        state.optimizer = opt.adam()
    history = []
    for it in range(opt.iterations):
        inc = inc_full.subset(minibatch_index(opt.seed, it, inc_full.n, opt.batch_size))
        xi = _xi(state, state.K, opt.seed, it)
        z = stream(opt.seed, "latent", it).standard_normal((state.K, state.L, latent_spec.dim))
        try:
            elbo, ll, kl, grad = elbo_and_grad(state, kernel, inc, scale, xi, z)
        except NumericError as exc:
            raise TrainingAborted(f"iteration {it}: {exc}", it, state.params, history) from exc
        if not (np.isfinite(elbo) and np.all(np.isfinite(grad))):
            raise TrainingAborted(f"non-finite ELBO at iteration {it}", it, state.params, history)
        grad, norm = clip_by_global_norm(-grad, opt.clip)
        history.append({"iter": it, "elbo": elbo, "loglik_term": ll, "kl_term": kl, "grad_norm": norm})
        state.params = state.optimizer.step(state.params, grad)
    return state, history


def posterior_theta_samples(state, K_eval, seed):
    xi = stream(seed, "eval-posterior-noise").standard_normal((int(K_eval), state.posterior_spec.dim))
    theta, _ = flow_forward(state.posterior_spec, state.params, xi)
    return theta


def posterior_drift_samples(state, kernel, x_grid, K_eval=500, L_eval=1000, seed=0,
                            param_batch=20, latent_batch=100):
    """Averaged drift for each of ``K_eval`` posterior draws, shape ``(K_eval, G, d)``."""
    if K_eval < 1 or L_eval < 1:
        raise ConfigError("K_eval and L_eval must be >= 1")
    theta = posterior_theta_samples(state, K_eval, seed)
    z = stream(seed, "eval-latent").standard_normal((int(K_eval), int(L_eval), state.latent_spec.dim))
    return mc_drift_grid(kernel, state.latent_spec, theta, z, x_grid, param_batch, latent_batch)


def posterior_drift_bands(state, kernel, x_grid, K_eval=500, L_eval=1000, seed=0,
                          quantiles=(0.05, 0.95), param_batch=20, latent_batch=100):
    """Pointwise posterior mean and empirical quantile band (linear interpolation)."""
    lo_q, hi_q = quantiles
    if not (0 < lo_q < 1 and 0 < hi_q < 1):
        raise ConfigError(f"quantiles must lie in (0, 1), got {quantiles}")
    draws = posterior_drift_samples(state, kernel, x_grid, K_eval, L_eval, seed, param_batch, latent_batch)
    mean = draws.mean(axis=0)
    lower = np.quantile(draws, lo_q, axis=0)
    upper = np.quantile(draws, hi_q, axis=0)
    return mean, lower, upper
