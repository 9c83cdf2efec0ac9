"""Feedforward ReLU frame classifier with explicit forward/backward passes.

Frames are rows. Hidden layer ``k`` computes ``z_k = a_{k-1} W_k^T + b_k``
followed by an activation stage that is plain ReLU unless an adaptor for
``k`` is supplied. The output layer is an affine map followed by softmax.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .numerics import RandomStream

log = logging.getLogger(__name__)


class ShapeError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int
    hidden_dims: tuple
    num_classes: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if len(self.hidden_dims) < 1:
            raise ValueError("at least one hidden layer is required")
        if self.input_dim < 1 or self.num_classes < 1 or min(self.hidden_dims) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.activation != "relu":
            raise ValueError("only ReLU hidden activations are supported")

    @property
    def num_hidden(self) -> int:
        return len(self.hidden_dims)


@dataclass
class Network:
    config: NetworkConfig
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @classmethod
    def initialize(cls, config: NetworkConfig, stream: RandomStream) -> "Network":
        dims = [config.input_dim, *config.hidden_dims, config.num_classes]
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            weights.append(stream.normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in))
            biases.append(np.zeros(fan_out))
        return cls(config, weights, biases)

    def copy(self) -> "Network":
        return Network(self.config, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def check(self):
        dims = [self.config.input_dim, *self.config.hidden_dims, self.config.num_classes]
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ShapeError("layer count does not match config")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[k + 1], dims[k]) or b.shape != (dims[k + 1],):
                raise ShapeError(f"layer {k} has shape {w.shape}/{b.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {k} has non-finite parameters")

    def equals(self, other: "Network") -> bool:
        return (
            self.config == other.config
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        )


class ReluStage:
    """Unadapted activation stage; the interface adaptors implement."""

    def forward(self, z):
        h = np.maximum(z, 0.0)
        return h, h, None

    def backward(self, z, h, cache, grad_out):
        return grad_out * (z > 0), None


RELU = ReluStage()


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    z: List[np.ndarray]
    h: List[np.ndarray]
    hs: List[np.ndarray]
    caches: List[object]
    logits: np.ndarray
    probs: np.ndarray
    adaptor: Optional[Mapping[int, object]] = None


@dataclass
class Gradients:
    """Gradients of the summed cross entropy ``-log P(C | O)``."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    grad_hs: List[np.ndarray]
    grad_z: List[np.ndarray]
    grad_logits: np.ndarray
    adapt: Dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class LabeledFrames:
    frames: np.ndarray
    labels: np.ndarray
    utt_bounds: np.ndarray
    speaker_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        self.labels = np.asarray(self.labels)
        self.utt_bounds = np.asarray(self.utt_bounds, dtype=int)
        n = self.frames.shape[0]
        if self.labels.shape[0] != n:
            raise ShapeError("label count differs from frame count")
        b = self.utt_bounds
        if b.ndim != 1 or b.size < 1 or b[0] != 0 or b[-1] != n or np.any(np.diff(b) <= 0):
            if not (n == 0 and b.size == 1 and b[0] == 0):
                raise ShapeError("utterance boundaries must partition the frames")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def num_utterances(self) -> int:
        return self.utt_bounds.size - 1

    def utterance_slices(self):
        return [slice(int(a), int(b)) for a, b in zip(self.utt_bounds[:-1], self.utt_bounds[1:])]

    def first_utterances(self, n: int) -> "LabeledFrames":
        end = int(self.utt_bounds[n])
        return LabeledFrames(self.frames[:end], self.labels[:end], self.utt_bounds[: n + 1], self.speaker_id)

    def with_labels(self, labels) -> "LabeledFrames":
        return LabeledFrames(self.frames, labels, self.utt_bounds, self.speaker_id)

    def subset(self, start: int, stop: int) -> "LabeledFrames":
        return LabeledFrames(self.frames[start:stop], self.labels[start:stop], [0, stop - start], self.speaker_id)


def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward(net: Network, frames, adaptor: Optional[Mapping[int, object]] = None) -> ForwardTrace:
    frames = np.asarray(frames, dtype=float)
    if frames.ndim != 2 or frames.shape[1] != net.config.input_dim:
        raise ShapeError(f"expected (n, {net.config.input_dim}) frames, got {frames.shape}")
    adaptor = adaptor or {}
    for k in adaptor:
        if not 0 <= k < net.config.num_hidden:
            raise ShapeError(f"adaptor layer {k} outside hidden layers")
    a = frames
    zs, hs, hss, caches = [], [], [], []
    for k in range(net.config.num_hidden):
        z = a @ net.weights[k].T + net.biases[k]
        h, h_adapted, cache = adaptor.get(k, RELU).forward(z)
        zs.append(z)
        hs.append(h)
        hss.append(h_adapted)
        caches.append(cache)
        a = h_adapted
    logits = a @ net.weights[-1].T + net.biases[-1]
    return ForwardTrace(frames, zs, hs, hss, caches, logits, softmax(logits), dict(adaptor) or None)


def targets_matrix(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        if labels.shape[1] != num_classes:
            raise ShapeError("soft label width differs from class count")
        return labels.astype(float)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels.astype(int)] = 1.0
    return out


def cross_entropy(probs_or_trace, labels) -> float:
    """Summed frame cross entropy against hard or soft labels."""
    if isinstance(probs_or_trace, ForwardTrace):
        logp = log_softmax(probs_or_trace.logits)
    else:
        logp = np.log(np.maximum(probs_or_trace, 1e-300))
    return float(-np.sum(targets_matrix(labels, logp.shape[1]) * logp))


def backward(net: Network, trace: ForwardTrace, labels, extra_logit_grad=None) -> Gradients:
    """Backpropagate the summed cross entropy of ``trace`` against ``labels``.

    ``extra_logit_grad`` is added to the loss gradient at the logits (used by
    output-level regularisers).
    """
    if len(trace.z) != net.config.num_hidden or trace.logits.shape[1] != net.config.num_classes:
        raise ShapeError("trace was not produced by this network")
    targets = targets_matrix(labels, net.config.num_classes)
    if targets.shape[0] != trace.logits.shape[0]:
        raise ShapeError("label count differs from traced frame count")
    # soft targets need not sum to one exactly; scale the probability term
    g = trace.probs * targets.sum(axis=1, keepdims=True) - targets
    if extra_logit_grad is not None:
        g = g + extra_logit_grad
    adaptor = trace.adaptor or {}
    L = net.config.num_hidden
    dW = [None] * (L + 1)
    db = [None] * (L + 1)
    grad_hs = [None] * L
    grad_z = [None] * L
    adapt = {}
    dW[L] = g.T @ trace.hs[L - 1]
    db[L] = g.sum(axis=0)
    upstream = g @ net.weights[L]
    for k in range(L - 1, -1, -1):
        grad_hs[k] = upstream
        gz, gparam = adaptor.get(k, RELU).backward(trace.z[k], trace.h[k], trace.caches[k], upstream)
        grad_z[k] = gz
        if gparam is not None:
            adapt[k] = gparam
        prev = trace.inputs if k == 0 else trace.hs[k - 1]
        dW[k] = gz.T @ prev
        db[k] = gz.sum(axis=0)
        if k > 0:
            upstream = gz @ net.weights[k]
    return Gradients(dW, db, grad_hs, grad_z, g, adapt)


def _transition_logs(num_classes: int, stay_prob: float):
    if num_classes == 1:
        return 0.0, -np.inf
    return np.log(stay_prob), np.log((1.0 - stay_prob) / (num_classes - 1))


def viterbi_decode(log_probs, utt_bounds, stay_prob: float = 0.875) -> np.ndarray:
    """Best state path per utterance under a sticky first-order chain.

    Every class may follow every other; staying has probability
    ``stay_prob`` and each switch shares the rest uniformly. Ties go to the
    lowest class index.
    """
    log_probs = np.asarray(log_probs, dtype=float)
    C = log_probs.shape[1]
    stay, switch = _transition_logs(C, stay_prob)
    out = np.empty(log_probs.shape[0], dtype=np.int64)
    for a, b in zip(utt_bounds[:-1], utt_bounds[1:]):
        lp = log_probs[a:b]
        T = lp.shape[0]
        back = np.zeros((T, C), dtype=np.int64)
        delta = lp[0].copy()
        for t in range(1, T):
            best_prev = int(np.argmax(delta))
            from_switch = delta[best_prev] + switch
            from_stay = delta + stay
            use_stay = from_stay >= from_switch
            back[t] = np.where(use_stay, np.arange(C), best_prev)
            delta = np.where(use_stay, from_stay, from_switch) + lp[t]
        path = np.empty(T, dtype=np.int64)
        path[-1] = int(np.argmax(delta))
        for t in range(T - 1, 0, -1):
            path[t - 1] = back[t, path[t]]
        out[a:b] = path
    return out


def forward_backward(log_probs, utt_bounds, stay_prob: float = 0.875) -> np.ndarray:
    """Per-frame state posteriors under the same sticky chain."""
    log_probs = np.asarray(log_probs, dtype=float)
    C = log_probs.shape[1]
    stay, switch = _transition_logs(C, stay_prob)
    trans = np.full((C, C), np.exp(switch))
    np.fill_diagonal(trans, np.exp(stay))
    out = np.empty_like(log_probs)
    for a, b in zip(utt_bounds[:-1], utt_bounds[1:]):
        lp = log_probs[a:b]
        em = np.exp(lp - lp.max(axis=1, keepdims=True))
        T = lp.shape[0]
        alpha = np.empty((T, C))
        beta = np.empty((T, C))
        alpha[0] = em[0] / em[0].sum()
        for t in range(1, T):
            v = (alpha[t - 1] @ trans) * em[t]
            alpha[t] = v / v.sum()
        beta[-1] = 1.0
        for t in range(T - 2, -1, -1):
            v = trans @ (em[t + 1] * beta[t + 1])
            beta[t] = v / v.sum()
        post = alpha * beta
        out[a:b] = post / post.sum(axis=1, keepdims=True)
    return out


PSEUDO_LABEL_MODES = ("hard", "soft", "viterbi", "lattice")


def pseudo_label(net: Network, frames, mode: str = "hard", adaptor=None, utt_bounds=None,
                 stay_prob: float = 0.875):
    """Supervision decoded from the model output.

    ``hard`` is the per-frame argmax (ties go to the lowest class index) and
    ``soft`` the full posterior rows. ``viterbi`` and ``lattice`` decode each
    utterance with a sticky state chain, giving the best path or the
    per-frame state posteriors; they need ``utt_bounds``.
    """
    probs = forward(net, frames, adaptor).probs
    if mode == "hard":
        return np.argmax(probs, axis=1)
    if mode == "soft":
        return probs
    if mode in ("viterbi", "lattice"):
        if utt_bounds is None:
            utt_bounds = [0, probs.shape[0]]
        logp = np.log(np.maximum(probs, 1e-300))
        if mode == "viterbi":
            return viterbi_decode(logp, utt_bounds, stay_prob)
        return forward_backward(logp, utt_bounds, stay_prob)
    raise ValueError(f"unknown pseudo-label mode {mode!r}")


def frame_errors(probs, labels) -> np.ndarray:
    """Boolean per-frame error indicator against hard labels."""
    return np.argmax(probs, axis=1) != np.asarray(labels)


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 20
    patience: int = 2
    min_rel_improvement: float = 1e-3
    weight_decay: float = 0.0


def speaker_batches(corpus_speakers: Sequence[LabeledFrames], batch_size: int, stream: RandomStream):
    """Shuffled list of ``(speaker_index, frame_indices)`` batches.

    Every batch holds frames of a single speaker so the same batching drives
    both plain and speaker-adaptive training.
    """
    batches = []
    for s, spk in enumerate(corpus_speakers):
        order = stream.permutation(len(spk))
        for start in range(0, len(spk), batch_size):
            batches.append((s, order[start:start + batch_size]))
    perm = stream.permutation(len(batches))
    return [batches[i] for i in perm]


def sgd_epochs(net: Network, speakers: Sequence[LabeledFrames], cfg: TrainConfig,
               stream: RandomStream, adaptor_for=None, on_batch=None):
    """Shared mini-batch loop for SI and SAT training.

    ``adaptor_for(s)`` returns the adaptor of speaker ``s`` (or None) and
    ``on_batch(s, grads)`` receives the gradients after each SI update.
    Returns the per-epoch mean frame loss.
    """
    velocity_w = [np.zeros_like(w) for w in net.weights]
    velocity_b = [np.zeros_like(b) for b in net.biases]
    history = []
    best = np.inf
    stall = 0
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for s, idx in speaker_batches(speakers, cfg.batch_size, stream):
            spk = speakers[s]
            x = spk.frames[idx]
            y = spk.labels[idx]
            adaptor = adaptor_for(s) if adaptor_for else None
            trace = forward(net, x, adaptor)
            loss = cross_entropy(trace, y)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            grads = backward(net, trace, y)
            scale = 1.0 / len(idx)
            for k in range(len(net.weights)):
                gw = grads.weights[k] * scale
                if cfg.weight_decay:
                    gw = gw + cfg.weight_decay * net.weights[k]
                velocity_w[k] = cfg.momentum * velocity_w[k] - cfg.learning_rate * gw
                velocity_b[k] = cfg.momentum * velocity_b[k] - cfg.learning_rate * grads.biases[k] * scale
                net.weights[k] += velocity_w[k]
                net.biases[k] += velocity_b[k]
            if on_batch is not None:
                on_batch(s, grads)
            total += loss
            count += len(idx)
        mean_loss = total / max(count, 1)
        history.append(mean_loss)
        log.debug("epoch %d loss %.5f", epoch, mean_loss)
        if mean_loss < best * (1.0 - cfg.min_rel_improvement):
            best = mean_loss
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                break
    return history


def train_si(speakers: Sequence[LabeledFrames], net_config: NetworkConfig, cfg: TrainConfig,
             stream: RandomStream):
    """Train a speaker-independent model. Returns ``(net, loss_history)``."""
    if not speakers or sum(len(s) for s in speakers) == 0:
        raise ValueError("empty training corpus")
    net = Network.initialize(net_config, stream)
    history = sgd_epochs(net, speakers, cfg, stream)
    return net, history
