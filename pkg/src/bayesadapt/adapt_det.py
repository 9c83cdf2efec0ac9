"""Deterministic speaker-dependent transforms (LHUC, HUB, PAct, LHN),
minimum cross-entropy estimation and regularised baselines."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .network import (
    DivergenceError,
    LabeledFrames,
    Network,
    ShapeError,
    backward,
    cross_entropy,
    forward,
    pseudo_label,
    softmax,
)
from .numerics import GaussianSpec, RandomStream, gaussian_draw

log = logging.getLogger(__name__)

SdParams = Dict[int, np.ndarray]


class Activation(str, enum.Enum):
    IDENTITY = "identity"
    TWO_SIGMOID = "2sigmoid"
    EXPONENTIAL = "exponential"
    TANH = "tanh"

    def __call__(self, r):
        if self is Activation.IDENTITY:
            return r
        if self is Activation.TWO_SIGMOID:
            return 2.0 / (1.0 + np.exp(-r))
        if self is Activation.EXPONENTIAL:
            return np.exp(r)
        return np.tanh(r)

    def derivative(self, r):
        if self is Activation.IDENTITY:
            return np.ones_like(r)
        if self is Activation.TWO_SIGMOID:
            s = 1.0 / (1.0 + np.exp(-r))
            return 2.0 * s * (1.0 - s)
        if self is Activation.EXPONENTIAL:
            return np.exp(r)
        return 1.0 - np.tanh(r) ** 2


class Variant(str, enum.Enum):
    LHUC = "lhuc"
    HUB = "hub"
    PACT = "pact"
    LHN = "lhn"


_ALLOWED_ACTIVATIONS = {
    Variant.LHUC: {Activation.IDENTITY, Activation.TWO_SIGMOID, Activation.EXPONENTIAL},
    Variant.HUB: {Activation.IDENTITY, Activation.TANH},
    Variant.PACT: {Activation.IDENTITY},
    Variant.LHN: {Activation.IDENTITY},
}


@dataclass(frozen=True)
class AdaptMethod:
    variant: Variant
    layers: tuple = (0,)
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "activation", Activation(self.activation))
        object.__setattr__(self, "layers", tuple(sorted(int(k) for k in self.layers)))
        if not self.layers:
            raise ValueError("at least one adapted layer is required")
        if self.activation not in _ALLOWED_ACTIVATIONS[self.variant]:
            raise ValueError(f"{self.activation.value} is not a valid activation for {self.variant.value}")
        if self.variant is Variant.LHN and len(self.layers) != 1:
            raise ValueError("LHN inserts a single matrix at one layer")

    def validate(self, net: Network):
        for k in self.layers:
            if not 0 <= k < net.config.num_hidden:
                raise ShapeError(f"layer {k} is not a hidden layer of this network")

    def param_shape(self, width: int) -> tuple:
        if self.variant is Variant.PACT:
            return (2 * width,)
        if self.variant is Variant.LHN:
            return (width, width)
        return (width,)


def neutral_params(method: AdaptMethod, net: Network) -> SdParams:
    """SD parameters that leave the network output unchanged."""
    method.validate(net)
    params = {}
    for k in method.layers:
        width = net.config.hidden_dims[k]
        if method.variant is Variant.LHUC:
            fill = 1.0 if method.activation is Activation.IDENTITY else 0.0
            params[k] = np.full(width, fill)
        elif method.variant is Variant.HUB:
            params[k] = np.zeros(width)
        elif method.variant is Variant.PACT:
            params[k] = np.concatenate([np.ones(width), np.zeros(width)])
        else:
            params[k] = np.eye(width)
    return params


def apply_sd(method: AdaptMethod, values, r):
    """Adapt one layer's values with SD parameters ``r``.

    ``values`` is the ReLU output ``h`` for LHUC and HUB, and the linear
    pre-activation ``z`` for PAct and LHN. LHN returns the transformed
    pre-activation, which the network then passes through ReLU.
    """
    values = np.asarray(values, dtype=float)
    r = np.asarray(r, dtype=float)
    width = values.shape[-1]
    if r.shape != method.param_shape(width):
        raise ShapeError(f"SD parameter shape {r.shape} does not fit layer width {width}")
    v = method.variant
    if v is Variant.LHUC:
        return method.activation(r) * values
    if v is Variant.HUB:
        return values + method.activation(r)
    if v is Variant.PACT:
        alpha, beta = r[:width], r[width:]
        return np.where(values > 0, alpha * values, beta * values)
    return values @ r.T


def sd_gradient(method: AdaptMethod, r, values, grad_out):
    """Per-layer gradient of the summed CE w.r.t. ``r`` (the G terms).

    ``values`` are the inputs given to :func:`apply_sd` for this layer and
    ``grad_out`` is the loss gradient w.r.t. its output, one row per frame.
    Returns ``(G, grad_values)``.
    """
    r = np.asarray(r, dtype=float)
    v = method.variant
    if v is Variant.LHUC:
        G = method.activation.derivative(r) * np.sum(grad_out * values, axis=0)
        return G, grad_out * method.activation(r)
    if v is Variant.HUB:
        return method.activation.derivative(r) * np.sum(grad_out, axis=0), grad_out
    if v is Variant.PACT:
        width = values.shape[-1]
        alpha, beta = r[:width], r[width:]
        pos = values > 0
        gz = grad_out * values
        G = np.concatenate([np.sum(np.where(pos, gz, 0.0), axis=0), np.sum(np.where(pos, 0.0, gz), axis=0)])
        return G, grad_out * np.where(pos, alpha, beta)
    return grad_out.T @ values, grad_out @ r


class AdaptedStage:
    """Activation stage of one hidden layer carrying SD parameters."""

    def __init__(self, method: AdaptMethod, r):
        self.method = method
        self.r = np.asarray(r, dtype=float)

    def forward(self, z):
        v = self.method.variant
        if v is Variant.LHN:
            zt = apply_sd(self.method, z, self.r)
            h = np.maximum(zt, 0.0)
            return h, h, zt
        h = np.maximum(z, 0.0)
        if v is Variant.PACT:
            return h, apply_sd(self.method, z, self.r), None
        return h, apply_sd(self.method, h, self.r), None

    def backward(self, z, h, cache, grad_out):
        v = self.method.variant
        if v is Variant.LHN:
            gzt = grad_out * (cache > 0)
            G, gz = sd_gradient(self.method, self.r, z, gzt)
            return gz, G
        if v is Variant.PACT:
            G, gz = sd_gradient(self.method, self.r, z, grad_out)
            return gz, G
        G, gh = sd_gradient(self.method, self.r, h, grad_out)
        return gh * (z > 0), G


def make_adaptor(method: AdaptMethod, params: SdParams):
    return {k: AdaptedStage(method, params[k]) for k in method.layers}


def limit_change(step, max_change: Optional[float]):
    """Rescale an update so its L2 norm is at most ``max_change``."""
    if max_change is None:
        return step
    norm = float(np.sqrt(np.sum(np.square(step))))
    if norm > max_change:
        return step * (max_change / norm)
    return step


def batch_bounds(n_frames: int, batch_frames: int):
    """Contiguous frame blocks in utterance order; the last may be short."""
    return [(s, min(s + batch_frames, n_frames)) for s in range(0, n_frames, batch_frames)]


def batch_sd_gradient(net: Network, method: AdaptMethod, params: SdParams, frames, labels):
    """Summed CE and its gradient w.r.t. every adapted layer's parameters."""
    trace = forward(net, frames, make_adaptor(method, params))
    loss = cross_entropy(trace, labels)
    grads = backward(net, trace, labels)
    return loss, grads.adapt, trace


DEFAULT_LEARNING_RATES = {Variant.LHUC: 0.01, Variant.PACT: 0.01, Variant.LHN: 0.01, Variant.HUB: 1e-6}


@dataclass
class AdaptHyper:
    learning_rate: Optional[float] = None
    epochs: int = 7
    batch_frames: int = 64
    supervision: str = "hard"
    redecode_count: int = 0
    max_change: Optional[float] = None

    def lr_for(self, method: AdaptMethod) -> float:
        if self.learning_rate is not None:
            return float(self.learning_rate)
        return DEFAULT_LEARNING_RATES[method.variant]


@dataclass
class NoRegularizer:
    pass


@dataclass
class MAPRegularizer:
    """Gaussian prior penalty ``weight * 0.5 * sum((r - mu0)^2 / sigma0^2)``."""

    prior: "object"
    weight: float = 1.0


@dataclass
class KLOutputRegularizer:
    weight: float = 0.1


@dataclass
class NoisyRegularizer:
    """Zero-mean noise with the prior's standard deviations added to ``r``
    for every batch forward pass; the stored ``r`` never accumulates it."""

    prior: "object"


Regularizer = Union[NoRegularizer, MAPRegularizer, KLOutputRegularizer, NoisyRegularizer]


def kl_output_penalty(si_probs, adapted_probs):
    """Mean per-frame KL(SI || adapted) and its gradient w.r.t. adapted logits."""
    si_probs = np.asarray(si_probs, dtype=float)
    adapted_probs = np.asarray(adapted_probs, dtype=float)
    if si_probs.shape != adapted_probs.shape:
        raise ShapeError("distribution shapes differ")
    for p in (si_probs, adapted_probs):
        if np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("inputs must be per-frame probability distributions")
    n = si_probs.shape[0]
    ratio = np.where(si_probs > 0, si_probs / np.maximum(adapted_probs, 1e-300), 1.0)
    kl = np.sum(np.where(si_probs > 0, si_probs * np.log(ratio), 0.0)) / n
    return float(kl), (adapted_probs - si_probs) / n


def prior_layer(prior, k):
    """``GaussianSpec`` of layer ``k`` from a prior object or mapping."""
    layers = getattr(prior, "layers", prior)
    return layers[k]


def supervise(net: Network, data: LabeledFrames, mode: str, method=None, params=None,
              stay_prob: float = 0.875) -> LabeledFrames:
    """Replace labels by decoded supervision from the (optionally adapted) model.

    Mode ``"true"`` keeps the reference labels (supervised adaptation).
    """
    if mode == "true":
        return data
    adaptor = make_adaptor(method, params) if params is not None else None
    return data.with_labels(pseudo_label(net, data.frames, mode, adaptor, data.utt_bounds, stay_prob))


def adapt_min_ce(net: Network, data: LabeledFrames, method: AdaptMethod, hyper: AdaptHyper,
                 reg: Regularizer = None, stream: Optional[RandomStream] = None,
                 init: Optional[SdParams] = None, trajectory: Optional[list] = None) -> SdParams:
    """Minimum cross-entropy SGD estimate of speaker-dependent parameters.

    ``data`` carries the supervision to fit. The step is ``lr * G`` with
    ``G`` summed over the batch frames. When ``trajectory`` is a list, a copy
    of the parameters is appended after every update.
    """
    reg = reg if reg is not None else NoRegularizer()
    method.validate(net)
    if len(data) == 0:
        raise ValueError("empty adaptation set")
    if isinstance(reg, NoisyRegularizer) and stream is None:
        raise ValueError("noisy adaptation needs a random stream")
    params = {k: v.copy() for k, v in (init or neutral_params(method, net)).items()}
    lr = hyper.lr_for(method)
    bounds = batch_bounds(len(data), hyper.batch_frames)
    for rnd in range(hyper.redecode_count + 1):
        if rnd > 0:
            data = supervise(net, data, hyper.supervision, method, params)
        for epoch in range(hyper.epochs):
            for b, (start, stop) in enumerate(bounds):
                x = data.frames[start:stop]
                y = data.labels[start:stop]
                used = params
                if isinstance(reg, NoisyRegularizer):
                    used = {}
                    for k in method.layers:
                        p0 = prior_layer(reg.prior, k)
                        used[k], _ = gaussian_draw(stream, GaussianSpec(params[k].reshape(-1), p0.sigma))
                        used[k] = used[k].reshape(params[k].shape)
                adaptor = make_adaptor(method, used)
                trace = forward(net, x, adaptor)
                extra = None
                if isinstance(reg, KLOutputRegularizer) and reg.weight:
                    si_probs = forward(net, x).probs
                    _, g_logits = kl_output_penalty(si_probs, trace.probs)
                    extra = reg.weight * len(x) * g_logits
                loss = cross_entropy(trace, y)
                if not np.isfinite(loss):
                    raise DivergenceError(f"non-finite adaptation loss at epoch {epoch}, batch {b}")
                G = backward(net, trace, y, extra).adapt
                for k in method.layers:
                    g = G[k]
                    if not np.all(np.isfinite(g)):
                        raise DivergenceError(f"non-finite gradient at epoch {epoch}, batch {b}")
                    if isinstance(reg, MAPRegularizer):
                        # implicit step on the quadratic penalty stays stable for any weight
                        p0 = prior_layer(reg.prior, k)
                        shape = params[k].shape
                        c = lr * reg.weight / p0.sigma_vector().reshape(shape) ** 2
                        mu0 = p0.mu.reshape(shape)
                        params[k] = (params[k] - limit_change(lr * g, hyper.max_change) + c * mu0) / (1.0 + c)
                    else:
                        params[k] = params[k] - limit_change(lr * g, hyper.max_change)
                if trajectory is not None:
                    trajectory.append({k: v.copy() for k, v in params.items()})
    return params
