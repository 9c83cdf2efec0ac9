"""Method x budget x seed sweeps over test speakers."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional

import numpy as np

from ..adapt_bayes import BayesHyper, adapt_bayes, empirical_prior, fixed_prior, infer
from ..adapt_det import (
    AdaptHyper,
    AdaptMethod,
    KLOutputRegularizer,
    MAPRegularizer,
    NoisyRegularizer,
    NoRegularizer,
    adapt_min_ce,
    make_adaptor,
    neutral_params,
    supervise,
)
from ..datagen import Corpus, GenConfig, budget_split, generate_corpus
from ..formats import load_corpus, load_network
from ..network import LabeledFrames, Network, NetworkConfig, TrainConfig, forward, frame_errors, train_si
from ..numerics import RandomStream, derive_seed
from ..sat import train_sat
from .config import ConfigError, ExperimentConfig, MethodSpec

log = logging.getLogger(__name__)


@dataclass
class ResultRow:
    method: str
    budget: object
    seed: int
    speaker_id: str
    frame_error_rate: float
    num_frames: int
    utterance_errors: List[int] = field(default_factory=list)
    wallclock_ms: float = 0.0
    status: str = "ok"

    def sort_key(self, method_order: Dict[str, int], budget_order: Dict[object, int]):
        return (method_order.get(self.method, 0), budget_order.get(self.budget, 0), self.seed, self.speaker_id)


def resolve_method(spec: MethodSpec, net: Network) -> Optional[AdaptMethod]:
    if spec.variant == "none":
        return None
    L = net.config.num_hidden
    layers = spec.layers
    if layers is None:
        layers = "first" if spec.variant in ("pact", "lhn") else "all"
    if layers == "all":
        layers = range(L)
    elif layers == "first":
        layers = (0,)
    elif isinstance(layers, int):
        layers = range(layers)
    activation = spec.activation
    if activation is None:
        activation = {"lhuc": "2sigmoid", "hub": "tanh"}.get(spec.variant, "identity")
    return AdaptMethod(spec.variant, tuple(layers), activation)


def _adapt_hyper(spec: MethodSpec, supervision: str) -> AdaptHyper:
    hyper = dict(spec.hyper)
    hyper.setdefault("supervision", supervision)
    try:
        return AdaptHyper(**hyper)
    except TypeError as exc:
        raise ConfigError(f"method {spec.name}: {exc}") from exc


def _bayes_hyper(spec: MethodSpec, adapt: AdaptHyper) -> BayesHyper:
    try:
        return BayesHyper(adapt=adapt, **spec.bayes_hyper)
    except TypeError as exc:
        raise ConfigError(f"method {spec.name}: {exc}") from exc


def build_corpus(cfg: ExperimentConfig, seed: int) -> Corpus:
    if cfg.corpus.get("path"):
        return load_corpus(cfg.corpus["path"])
    return generate_corpus(GenConfig.from_dict(cfg.corpus.get("gen", {})), seed)


def sat_method(cfg: ExperimentConfig, net_cfg: NetworkConfig) -> AdaptMethod:
    sat = cfg.sat or {}
    layers = sat.get("layers", "all")
    if layers == "all":
        layers = range(net_cfg.num_hidden)
    return AdaptMethod(sat.get("variant", "lhuc"), tuple(layers), sat.get("activation", "2sigmoid"))


def train_model(cfg: ExperimentConfig, corpus: Corpus, seed: int, sat: Optional[bool] = None):
    """Train the SI (or SAT, when configured) model for one seed.

    Returns ``(net, sat_state)``; ``sat_state`` is None for SI training.
    """
    gen = corpus.config
    net_cfg = NetworkConfig(gen.feature_dim, tuple(cfg.network["hidden_dims"]), gen.num_classes)
    train_cfg = TrainConfig(**cfg.train)
    stream = RandomStream(derive_seed(seed, "train"))
    use_sat = bool(cfg.sat) if sat is None else sat
    if use_sat:
        state = train_sat(corpus.train, net_cfg, sat_method(cfg, net_cfg), train_cfg,
                          float((cfg.sat or {}).get("sd_learning_rate", 0.01)), stream)
        return state.net, state
    net, _ = train_si(corpus.train, net_cfg, train_cfg, stream)
    return net, None


class SeedContext:
    """Corpus, trained model and lazily computed priors for one seed."""

    def __init__(self, cfg: ExperimentConfig, seed: int, net: Optional[Network] = None,
                 corpus: Optional[Corpus] = None):
        self.cfg = cfg
        self.seed = seed
        self.corpus = corpus if corpus is not None else build_corpus(cfg, seed)
        if net is None and cfg.network.get("path"):
            net = load_network(cfg.network["path"])
        self.net = net if net is not None else train_model(cfg, self.corpus, seed)[0]
        self._priors = {}

    def prior_for(self, spec: MethodSpec, method: AdaptMethod):
        source = spec.prior if spec.prior is not None else "fixed"
        if isinstance(source, dict):
            return fixed_prior(method, self.net, **source)
        if source == "fixed":
            return fixed_prior(method, self.net)
        if source != "empirical":
            raise ConfigError(f"unknown prior source {source!r}")
        key = (method, spec.activation)
        if key not in self._priors:
            hyper = _adapt_hyper(spec, "true")
            params = [adapt_min_ce(self.net, spk, method, hyper) for spk in self.corpus.train]
            self._priors[key] = empirical_prior(params)
        return self._priors[key]


def _regularizer(spec: MethodSpec, ctx: SeedContext, method: AdaptMethod):
    reg = spec.regularizer
    if not reg:
        return NoRegularizer()
    kind = reg.get("kind")
    if kind == "map":
        prior_spec = MethodSpec(name=spec.name, prior=reg.get("prior", "fixed"), hyper=spec.hyper)
        return MAPRegularizer(ctx.prior_for(prior_spec, method), float(reg.get("weight", 1.0)))
    if kind == "kl-output":
        return KLOutputRegularizer(float(reg.get("weight", 0.1)))
    if kind == "noisy":
        prior_spec = MethodSpec(name=spec.name, prior=reg.get("prior", "fixed"), hyper=spec.hyper)
        return NoisyRegularizer(ctx.prior_for(prior_spec, method))
    raise ConfigError(f"unknown regularizer kind {kind!r}")


def adapt_and_score(ctx: SeedContext, spec: MethodSpec, speaker: LabeledFrames, budget) -> ResultRow:
    cfg = ctx.cfg
    t0 = time.perf_counter()
    net = ctx.net
    adapt_set, eval_set = budget_split(speaker, budget, cfg.split)
    method = resolve_method(spec, net)
    stream = RandomStream(derive_seed(ctx.seed, spec.name, str(budget), speaker.speaker_id))
    if method is None:
        probs = forward(net, eval_set.frames).probs
    else:
        hyper = _adapt_hyper(spec, cfg.supervision)
        adapt_set = supervise(net, adapt_set, hyper.supervision, stay_prob=cfg.stay_prob)
        if spec.bayes:
            bh = _bayes_hyper(spec, hyper)
            posterior, _ = adapt_bayes(net, adapt_set, method, ctx.prior_for(spec, method), bh, stream)
            probs = infer(net, eval_set.frames, posterior, method, bh.inference, bh.j_inf, stream)
        else:
            params = adapt_min_ce(net, adapt_set, method, hyper, _regularizer(spec, ctx, method), stream)
            probs = forward(net, eval_set.frames, make_adaptor(method, params)).probs
    wrong = frame_errors(probs, eval_set.labels)
    utt_errors = [int(wrong[s].sum()) for s in eval_set.utterance_slices()]
    elapsed = (time.perf_counter() - t0) * 1000.0
    return ResultRow(spec.name, budget, ctx.seed, speaker.speaker_id, float(wrong.mean()), int(wrong.size),
                     utt_errors, elapsed)


def run_sweep(cfg: ExperimentConfig, sink: Optional[Callable[[ResultRow], None]] = None) -> List[ResultRow]:
    """Full factorial sweep; rows come back ordered by (method, budget, seed, speaker).

    A speaker-level failure becomes a row with ``status`` describing the
    error and a NaN error rate; the sweep carries on.
    """
    method_order = {m.name: i for i, m in enumerate(cfg.methods)}
    budget_order = {b: i for i, b in enumerate(cfg.budgets)}
    rows: List[ResultRow] = []
    for seed in cfg.seeds:
        ctx = SeedContext(cfg, seed)
        speakers = ctx.corpus.test[: cfg.test_speakers] if cfg.test_speakers else ctx.corpus.test
        jobs = [(spec, spk, b) for spec in cfg.methods for b in cfg.budgets for spk in speakers]

        def work(job):
            spec, spk, b = job
            try:
                return adapt_and_score(ctx, spec, spk, b)
            except (ArithmeticError, ValueError) as exc:
                if isinstance(exc, ConfigError):
                    raise
                log.warning("%s budget %s speaker %s failed: %s", spec.name, b, spk.speaker_id, exc)
                return ResultRow(spec.name, b, seed, spk.speaker_id, float("nan"), 0, [], 0.0,
                                 f"failed: {type(exc).__name__}: {exc}")

        if cfg.jobs > 1:
            with ThreadPoolExecutor(cfg.jobs) as pool:
                seed_rows = list(pool.map(work, jobs))
        else:
            seed_rows = [work(j) for j in jobs]
        seed_rows.sort(key=lambda r: r.sort_key(method_order, budget_order))
        for row in seed_rows:
            if sink is not None:
                sink(row)
        rows.extend(seed_rows)
    rows.sort(key=lambda r: r.sort_key(method_order, budget_order))
    return rows
