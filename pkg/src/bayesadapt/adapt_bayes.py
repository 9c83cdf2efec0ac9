"""Variational Bayesian adaptation of speaker-dependent parameters.

Each adapted layer carries a diagonal Gaussian posterior ``q = N(mu, sigma^2)``
(sigma optionally tied to one scalar per layer). Updates follow the
reparameterised gradient of the bound

    L(q) = -E_q[log P(C | O, r)] + KL(q || p0)

estimated per mini-batch with the data term scaled by ``N_s / N_ms``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .adapt_det import (
    Activation,
    AdaptHyper,
    AdaptMethod,
    SdParams,
    Variant,
    batch_bounds,
    limit_change,
    make_adaptor,
    supervise,
)
from .network import DivergenceError, LabeledFrames, Network, backward, cross_entropy, forward
from .numerics import (
    SIGMA_FLOOR,
    GaussianSpec,
    RandomStream,
    gaussian_draw,
    kl_diag_gaussian,
    kl_diag_gaussian_grad,
)

log = logging.getLogger(__name__)

BHUB_PRIOR_VARIANCE = 0.01
BLHN_PRIOR_SIGMA = 0.1


@dataclass
class Posterior:
    """Per-layer Gaussian posterior over flattened SD parameters."""

    layers: Dict[int, GaussianSpec]

    @property
    def tied(self) -> bool:
        return all(spec.tied for spec in self.layers.values())

    def means(self, method: AdaptMethod, net: Network) -> SdParams:
        return {k: spec.mu.reshape(method.param_shape(net.config.hidden_dims[k]))
                for k, spec in self.layers.items()}

    def copy(self) -> "Posterior":
        return Posterior({k: GaussianSpec(s.mu.copy(), s.sigma if s.tied else s.sigma.copy())
                          for k, s in self.layers.items()})


@dataclass
class PriorSpec:
    layers: Dict[int, GaussianSpec]
    source: str = "fixed"


def default_lambda(n: int) -> float:
    """KL weight ``min(10**(n - 5), 1)`` for ``n`` adapted layers."""
    if n < 1:
        raise ValueError("at least one adapted layer is required")
    return min(10.0 ** (n - 5), 1.0)


def fixed_prior(method: AdaptMethod, net: Network, hub_variance: float = BHUB_PRIOR_VARIANCE,
                lhn_sigma: float = BLHN_PRIOR_SIGMA) -> PriorSpec:
    """Default prior per method and activation.

    LHUC identity N(1, 1); LHUC 2sigmoid/exponential N(0, 1); HUB N(0, 0.01)
    with 0.01 read as a variance; PAct alpha N(1, 1) and beta N(0, 1). LHN
    has no tabulated prior; it defaults to N(I, 0.1^2) elementwise.
    """
    method.validate(net)
    layers = {}
    for k in method.layers:
        width = net.config.hidden_dims[k]
        v = method.variant
        if v is Variant.LHUC:
            mu = 1.0 if method.activation is Activation.IDENTITY else 0.0
            layers[k] = GaussianSpec(np.full(width, mu), np.ones(width))
        elif v is Variant.HUB:
            layers[k] = GaussianSpec(np.zeros(width), np.full(width, np.sqrt(hub_variance)))
        elif v is Variant.PACT:
            layers[k] = GaussianSpec(np.concatenate([np.ones(width), np.zeros(width)]), np.ones(2 * width))
        else:
            layers[k] = GaussianSpec(np.eye(width).reshape(-1), np.full(width * width, lhn_sigma))
    return PriorSpec(layers, "fixed")


def empirical_prior(training_params: Sequence[SdParams]) -> PriorSpec:
    """Per-dimension mean and population variance over training speakers.

    The variance is floored at ``SIGMA_FLOOR``.
    """
    if len(training_params) < 2:
        raise ValueError("an empirical prior needs at least two speakers")
    layers = {}
    for k in training_params[0]:
        stack = np.stack([np.asarray(p[k], dtype=float).reshape(-1) for p in training_params])
        mu0 = stack.mean(axis=0)
        var0 = np.mean((stack - mu0) ** 2, axis=0)
        layers[k] = GaussianSpec(mu0, np.sqrt(np.maximum(var0, SIGMA_FLOOR)))
    return PriorSpec(layers, "empirical")


def init_posterior(method: AdaptMethod, prior: PriorSpec, tied: bool = True) -> Posterior:
    layers = {}
    for k in method.layers:
        p0 = prior.layers[k]
        sigma = p0.sigma_vector()
        if tied:
            # np.mean of equal values can round away from them
            sigma = float(sigma[0]) if np.all(sigma == sigma[0]) else float(np.mean(sigma))
        layers[k] = GaussianSpec(p0.mu.copy(), sigma)
    return Posterior(layers)


def posterior_kl(posterior: Posterior, prior: PriorSpec) -> float:
    return sum(kl_diag_gaussian(q, prior.layers[k]) for k, q in posterior.layers.items())


@dataclass
class BayesHyper:
    adapt: AdaptHyper = field(default_factory=AdaptHyper)
    j_est: int = 1
    j_inf: int = 1
    lam: Optional[float] = None
    inference: str = "expectation"
    tied: bool = True
    freeze_sigma: bool = False
    sigma_update: str = "log"
    bound_samples: int = 4

    def __post_init__(self):
        if self.j_est < 1:
            raise ValueError("j_est must be >= 1")
        if self.sigma_update not in ("direct", "log"):
            raise ValueError("sigma_update must be 'direct' or 'log'")

    def lambda_for(self, method: AdaptMethod) -> float:
        return default_lambda(len(method.layers)) if self.lam is None else float(self.lam)


@dataclass
class AdaptBatch:
    frames: np.ndarray
    labels: np.ndarray
    n_total: int
    batch_id: int = 0

    @property
    def n_batch(self) -> int:
        return self.frames.shape[0]


@dataclass
class ElboGradient:
    """Pieces of the bound gradient for one batch.

    The full gradient is ``scale * data + lam * kl`` with ``scale = N_s / N_ms``.
    ``data_*`` hold the J-sample averages of ``G`` and ``G * eps``.
    """

    data_mu: Dict[int, np.ndarray]
    data_sigma: Dict[int, object]
    kl_mu: Dict[int, np.ndarray]
    kl_sigma: Dict[int, object]
    scale: float
    lam: float
    objective: float

    def mu(self, k):
        return self.scale * self.data_mu[k] + self.lam * self.kl_mu[k]

    def sigma(self, k):
        return self.scale * self.data_sigma[k] + self.lam * self.kl_sigma[k]


def draw_eps(posterior: Posterior, stream: RandomStream, j_est: int):
    """``j_est`` reparameterised draws; returns a list of ``(r, eps)`` dicts."""
    draws = []
    for _ in range(j_est):
        rs, eps = {}, {}
        for k in sorted(posterior.layers):
            rs[k], eps[k] = gaussian_draw(stream, posterior.layers[k])
        draws.append((rs, eps))
    return draws


def _sample_params(method, net, posterior, eps):
    out = {}
    for k, q in posterior.layers.items():
        r = q.mu + np.where(np.asarray(q.sigma) > SIGMA_FLOOR, q.sigma, 0.0) * eps[k]
        out[k] = r.reshape(method.param_shape(net.config.hidden_dims[k]))
    return out


def elbo_gradient(net: Network, batch: AdaptBatch, posterior: Posterior, prior: PriorSpec,
                  method: AdaptMethod, lam: float, eps_list: Sequence[Dict[int, np.ndarray]]) -> ElboGradient:
    """Batch bound and its gradient with the noise ``eps_list`` held fixed."""
    j_est = len(eps_list)
    scale = batch.n_total / batch.n_batch
    data_mu = {k: 0.0 for k in posterior.layers}
    data_sigma = {k: 0.0 for k in posterior.layers}
    ce = 0.0
    for eps in eps_list:
        params = _sample_params(method, net, posterior, eps)
        trace = forward(net, batch.frames, make_adaptor(method, params))
        ce += cross_entropy(trace, batch.labels)
        G = backward(net, trace, batch.labels).adapt
        for k, q in posterior.layers.items():
            g = G[k].reshape(-1)
            data_mu[k] = data_mu[k] + g
            ge = g * eps[k]
            data_sigma[k] = data_sigma[k] + (float(np.sum(ge)) if q.tied else ge)
    kl_mu, kl_sigma = {}, {}
    for k, q in posterior.layers.items():
        if j_est > 1:
            data_mu[k] = data_mu[k] / j_est
            data_sigma[k] = data_sigma[k] / j_est
        kl_mu[k], kl_sigma[k] = kl_diag_gaussian_grad(q, prior.layers[k])
    objective = scale * ce / j_est
    if lam:
        objective += lam * posterior_kl(posterior, prior)
    return ElboGradient(data_mu, data_sigma, kl_mu, kl_sigma, scale, lam, objective)


def elbo_objective(net, batch, posterior, prior, method, lam, eps_list) -> float:
    """Sampled batch bound ``(N_s/N_ms) * mean_j CE_j + lam * KL``."""
    ce = 0.0
    for eps in eps_list:
        params = _sample_params(method, net, posterior, eps)
        ce += cross_entropy(forward(net, batch.frames, make_adaptor(method, params)), batch.labels)
    out = batch.n_total / batch.n_batch * ce / len(eps_list)
    if lam:
        out += lam * posterior_kl(posterior, prior)
    return out


def elbo_step(net: Network, batch: AdaptBatch, posterior: Posterior, prior: PriorSpec,
              method: AdaptMethod, hyper: BayesHyper, stream: RandomStream) -> Posterior:
    """One SGD update of ``(mu, sigma)`` on a batch.

    The step is ``lr * (N_ms / N_s)`` times the bound gradient, so the data
    term moves with the same per-batch magnitude as deterministic min-CE
    adaptation under a shared learning rate.
    """
    if batch.n_batch == 0:
        raise ValueError("empty batch")
    lam = hyper.lambda_for(method)
    lr = hyper.adapt.lr_for(method)
    draws = draw_eps(posterior, stream, hyper.j_est)
    grad = elbo_gradient(net, batch, posterior, prior, method, lam, [eps for _, eps in draws])
    kl_weight = lam * batch.n_batch / batch.n_total
    layers = {}
    for k, q in posterior.layers.items():
        g_mu = grad.data_mu[k] + kl_weight * grad.kl_mu[k]
        if not np.all(np.isfinite(g_mu)):
            raise DivergenceError(f"non-finite mean gradient in batch {batch.batch_id}")
        mu = q.mu - limit_change(lr * g_mu, hyper.adapt.max_change)
        sigma = q.sigma
        if not hyper.freeze_sigma:
            g_sigma = grad.data_sigma[k] + kl_weight * grad.kl_sigma[k]
            if not np.all(np.isfinite(g_sigma)):
                raise DivergenceError(f"non-finite sigma gradient in batch {batch.batch_id}")
            if hyper.sigma_update == "direct":
                step = limit_change(lr * g_sigma, hyper.adapt.max_change)
                sigma = np.maximum(q.sigma - step, SIGMA_FLOOR)
            else:
                # chain rule through sigma = exp(rho)
                step = limit_change(lr * q.sigma * g_sigma, hyper.adapt.max_change)
                sigma = np.maximum(q.sigma * np.exp(-step), SIGMA_FLOOR)
            sigma = float(sigma) if q.tied else sigma
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise DivergenceError(f"posterior left the finite range in batch {batch.batch_id}")
        layers[k] = GaussianSpec(mu, sigma)
    return Posterior(layers)


def bound_value(net, data: LabeledFrames, posterior, prior, method, lam, eps_list) -> float:
    """Full-data bound evaluated with fixed noise draws."""
    batch = AdaptBatch(data.frames, data.labels, len(data))
    return elbo_objective(net, batch, posterior, prior, method, lam, eps_list)


def adapt_bayes(net: Network, data: LabeledFrames, method: AdaptMethod, prior: PriorSpec,
                hyper: BayesHyper, stream: RandomStream, trajectory: Optional[list] = None):
    """Variational adaptation; returns ``(posterior, per_epoch_bounds)``.

    The posterior starts at the prior. Bound values use ``bound_samples``
    noise draws taken once from a stream spawned off ``stream``'s seed, so
    they are comparable across epochs and do not perturb ``stream``.
    """
    method.validate(net)
    if len(data) == 0:
        raise ValueError("empty adaptation set")
    posterior = init_posterior(method, prior, hyper.tied)
    lam = hyper.lambda_for(method)
    bound_stream = stream.spawn("bound")
    fixed_eps = [eps for _, eps in draw_eps(posterior, bound_stream, hyper.bound_samples)]
    bounds = batch_bounds(len(data), hyper.adapt.batch_frames)
    history = []
    for rnd in range(hyper.adapt.redecode_count + 1):
        if rnd > 0:
            data = supervise(net, data, hyper.adapt.supervision, method, posterior.means(method, net))
        for epoch in range(hyper.adapt.epochs):
            for b, (start, stop) in enumerate(bounds):
                batch = AdaptBatch(data.frames[start:stop], data.labels[start:stop], len(data), b)
                posterior = elbo_step(net, batch, posterior, prior, method, hyper, stream)
                if trajectory is not None:
                    trajectory.append(posterior.copy())
            history.append(bound_value(net, data, posterior, prior, method, lam, fixed_eps))
    return posterior, history


def infer(net: Network, frames, posterior: Posterior, method: AdaptMethod, mode: str = "expectation",
          j_inf: int = 1, stream: Optional[RandomStream] = None):
    """Per-frame class probabilities under the posterior.

    ``expectation`` runs one forward pass at the posterior means;
    ``montecarlo`` averages the probabilities of ``j_inf`` posterior draws.
    """
    if mode == "expectation":
        return forward(net, frames, make_adaptor(method, posterior.means(method, net))).probs
    if mode != "montecarlo":
        raise ValueError(f"unknown inference mode {mode!r}")
    if j_inf < 1:
        raise ValueError("j_inf must be >= 1 for Monte Carlo inference")
    if stream is None:
        raise ValueError("Monte Carlo inference needs a random stream")
    total = None
    for rs, _ in draw_eps(posterior, stream, j_inf):
        params = {k: r.reshape(method.param_shape(net.config.hidden_dims[k])) for k, r in rs.items()}
        probs = forward(net, frames, make_adaptor(method, params)).probs
        total = probs if total is None else total + probs
    return total / j_inf
