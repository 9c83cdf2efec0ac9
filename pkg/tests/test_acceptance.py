"""Acceptance suite A1-A10; every test prints one PASS/FAIL line."""
import time

import numpy as np
import pytest
from scipy import stats

from bayesadapt import (
    SIGMA_FLOOR,
    AdaptHyper,
    AdaptMethod,
    BayesHyper,
    GaussianSpec,
    GenConfig,
    MAPRegularizer,
    Network,
    NetworkConfig,
    NoisyRegularizer,
    Posterior,
    RandomStream,
    TrainConfig,
    adapt_bayes,
    adapt_min_ce,
    default_lambda,
    empirical_prior,
    fixed_prior,
    forward,
    generate_corpus,
    infer,
    kl_diag_gaussian,
    train_si,
)
from bayesadapt.adapt_bayes import AdaptBatch, draw_eps, elbo_gradient, elbo_objective
from bayesadapt.adapt_det import batch_sd_gradient, make_adaptor
from bayesadapt.harness.config import ExperimentConfig
from bayesadapt.harness.report import summarize
from bayesadapt.harness.stats import matched_pairs_test
from bayesadapt.harness.sweep import SeedContext, adapt_and_score, build_corpus, train_model
from bayesadapt.network import cross_entropy
from bayesadapt.numerics import fd_gradient, max_relative_error

pytestmark = pytest.mark.acceptance

SEEDS = list(range(10))
VARIANTS = [("lhuc", "identity"), ("lhuc", "2sigmoid"), ("lhuc", "exponential"),
            ("hub", "identity"), ("hub", "tanh"), ("pact", "identity"), ("lhn", "identity")]


# A1 ---------------------------------------------------------------------------

def _random_config(rng):
    hidden = tuple(int(w) for w in rng.integers(3, 7, size=rng.integers(1, 4)))
    cfg = NetworkConfig(int(rng.integers(3, 7)), hidden, int(rng.integers(2, 5)))
    return Network.initialize(cfg, RandomStream(int(rng.integers(1 << 30))))


def _random_method(variant, activation, net, rng):
    n = len(net.config.hidden_dims)
    if variant == "lhn":
        layers = (int(rng.integers(n)),)
    else:
        layers = tuple(sorted(rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False).tolist()))
    return AdaptMethod(variant, layers, activation)


def _safe_frames(net, adaptors, rng, n, margin=1e-3):
    """Frames whose pre-activations stay clear of ReLU kinks under every adaptor."""
    x = rng.normal(size=(600 * n, net.config.input_dim))
    ok = np.ones(len(x), dtype=bool)
    for adaptor in adaptors:
        tr = forward(net, x, adaptor)
        for z, c in zip(tr.z, tr.caches):
            ok &= np.all(np.abs(c if c is not None else z) > margin, axis=1)
    if ok.sum() < n:
        return None
    return x[ok][:n]


def _det_error(net, method, rng):
    prior = fixed_prior(method, net)
    params = {k: (p.mu + rng.normal(scale=0.3, size=p.mu.shape)).reshape(method.param_shape(net.config.hidden_dims[k]))
              for k, p in prior.layers.items()}
    x = _safe_frames(net, [make_adaptor(method, params)], rng, 6)
    if x is None:
        return None
    y = rng.integers(0, net.config.num_classes, size=len(x))
    _, G, _ = batch_sd_gradient(net, method, params, x, y)
    worst = 0.0
    for k in method.layers:
        def f(v, k=k):
            p = dict(params)
            p[k] = v.reshape(params[k].shape)
            return cross_entropy(forward(net, x, make_adaptor(method, p)), y)

        worst = max(worst, max_relative_error(G[k].reshape(-1), fd_gradient(f, params[k].reshape(-1)), atol=1e-6))
    return worst


def _bayes_error(net, method, tied, rng):
    prior = fixed_prior(method, net)
    layers = {}
    for k, p in prior.layers.items():
        mu = p.mu + rng.normal(scale=0.2, size=p.mu.shape)
        sigma = float(rng.uniform(0.05, 0.3)) if tied else rng.uniform(0.05, 0.3, size=p.mu.shape)
        layers[k] = GaussianSpec(mu, sigma)
    post = Posterior(layers)
    draws = draw_eps(post, RandomStream(int(rng.integers(1 << 30))), 2)
    eps = [e for _, e in draws]
    adaptors = [make_adaptor(method, {k: r.reshape(method.param_shape(net.config.hidden_dims[k]))
                                      for k, r in rs.items()}) for rs, _ in draws]
    x = _safe_frames(net, adaptors, rng, 5)
    if x is None:
        return None
    batch = AdaptBatch(x, rng.integers(0, net.config.num_classes, size=len(x)), 4 * len(x))
    lam = float(rng.uniform(0.01, 1.0))
    grad = elbo_gradient(net, batch, post, prior, method, lam, eps)
    worst = 0.0
    for k, q in post.layers.items():
        def f_mu(v, k=k, q=q):
            p = post.copy()
            p.layers[k] = GaussianSpec(v, q.sigma)
            return elbo_objective(net, batch, p, prior, method, lam, eps)

        def f_sigma(v, k=k, q=q):
            p = post.copy()
            p.layers[k] = GaussianSpec(q.mu, float(v[0]) if tied else v)
            return elbo_objective(net, batch, p, prior, method, lam, eps)

        worst = max(worst, max_relative_error(grad.mu(k), fd_gradient(f_mu, q.mu), atol=1e-6))
        fd_s = fd_gradient(f_sigma, np.atleast_1d(np.asarray(q.sigma, dtype=float)), h=1e-5)
        worst = max(worst, max_relative_error(np.atleast_1d(grad.sigma(k)), fd_s, atol=1e-6))
    return worst


def test_a1_gradient_suite(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, checked, configs = 0.0, 0, 0
    while configs < 12:
        net = _random_config(rng)
        configs += 1
        for variant, activation in VARIANTS:
            method = _random_method(variant, activation, net, rng)
            for err in (_det_error(net, method, rng), _bayes_error(net, method, True, rng),
                        _bayes_error(net, method, False, rng)):
                if err is not None:
                    worst = max(worst, err)
                    checked += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and checked >= 10 * 3 * len(VARIANTS) and elapsed < 60
    verdict("A1", ok, f"max rel err {worst:.2e} over {checked} checks on {configs} configs, {elapsed:.1f}s")
    assert ok


# A2 ---------------------------------------------------------------------------

def test_a2_kl_monte_carlo(verdict):
    rng = np.random.default_rng(7)
    n = 10**6
    worst = 0.0
    for _ in range(20):
        d = int(rng.integers(1, 5))
        q = GaussianSpec(rng.normal(size=d), rng.uniform(0.3, 2.0, size=d))
        p = GaussianSpec(rng.normal(size=d), rng.uniform(0.3, 2.0, size=d))
        x = q.mu + q.sigma * rng.standard_normal((n, d))
        log_ratio = (stats.norm.logpdf(x, q.mu, q.sigma) - stats.norm.logpdf(x, p.mu, p.sigma)).sum(axis=1)
        se = log_ratio.std(ddof=1) / np.sqrt(n)
        worst = max(worst, abs(kl_diag_gaussian(q, p) - log_ratio.mean()) / se)
    q = GaussianSpec(rng.normal(size=3), rng.uniform(0.3, 2.0, size=3))
    self_kl = kl_diag_gaussian(q, q)
    ok = worst < 3.0 and self_kl == 0.0
    verdict("A2", ok, f"worst deviation {worst:.2f} SE over 20 specs, KL(q,q)={self_kl}")
    assert ok


# A3 ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy(tiny_corpus):
    cfg = NetworkConfig(tiny_corpus.config.feature_dim, (10, 8), tiny_corpus.config.num_classes)
    net, _ = train_si(tiny_corpus.train, cfg, TrainConfig(epochs=5), RandomStream(1))
    return net, tiny_corpus.test[0]


def _same_trajectory(det, bayes):
    return len(det) == len(bayes) and all(
        np.array_equal(d[k].reshape(-1), b.layers[k].mu) for d, b in zip(det, bayes) for k in d)


def test_a3_reduction_identities(verdict, toy):
    net, speaker = toy
    hyper = AdaptHyper(learning_rate=0.05, epochs=3, batch_frames=16)
    method = AdaptMethod("lhuc", (0, 1), "2sigmoid")
    prior = fixed_prior(method, net)

    det, bayes = [], []
    adapt_min_ce(net, speaker, method, hyper, trajectory=det)
    floor_prior = fixed_prior(method, net)
    for p in floor_prior.layers.values():
        p.sigma = np.full_like(p.sigma, SIGMA_FLOOR)
    adapt_bayes(net, speaker, method, floor_prior, BayesHyper(adapt=hyper, lam=0.0, freeze_sigma=True),
                RandomStream(5), trajectory=bayes)
    first = _same_trajectory(det, bayes)

    det, bayes = [], []
    adapt_min_ce(net, speaker, method, hyper, NoisyRegularizer(prior), RandomStream(9), trajectory=det)
    adapt_bayes(net, speaker, method, prior, BayesHyper(adapt=hyper, lam=0.0, freeze_sigma=True, tied=False),
                RandomStream(9), trajectory=bayes)
    second = _same_trajectory(det, bayes)

    x = np.random.default_rng(0).normal(size=(200, net.config.input_dim))
    pact = AdaptMethod("pact", (0, 1))
    neutral = {k: p.mu.reshape(pact.param_shape(net.config.hidden_dims[k]))
               for k, p in fixed_prior(pact, net).layers.items()}
    a, b = forward(net, x), forward(net, x, make_adaptor(pact, neutral))
    third = np.array_equal(a.logits, b.logits) and all(np.array_equal(u, v) for u, v in zip(a.h, b.h))

    ok = first and second and third
    verdict("A3", ok, f"(i) floor-sigma = min-CE: {first}, (ii) fixed-sigma = noisy: {second}, "
                      f"(iii) PAct(1,0) = ReLU: {third}")
    assert ok


# A4 ---------------------------------------------------------------------------

def test_a4_inference_equivalences(verdict):
    t0 = time.perf_counter()
    gen = GenConfig(num_classes=8, feature_dim=10, train_speakers=8, test_speakers=1,
                    utterances_per_speaker=40, frames_per_utterance=50)
    corpus = generate_corpus(gen, 0)
    net, _ = train_si(corpus.train, NetworkConfig(10, (32, 32), 8), TrainConfig(epochs=5), RandomStream(1))
    speaker = corpus.test[0]
    method = AdaptMethod("lhuc", (0, 1), "2sigmoid")
    post, _ = adapt_bayes(net, speaker, method, fixed_prior(method, net), BayesHyper(), RandomStream(3))
    exp_probs = infer(net, speaker.frames, post, method)
    det_probs = forward(net, speaker.frames, make_adaptor(method, post.means(method, net))).probs
    exact = np.array_equal(exp_probs, det_probs) and np.array_equal(exp_probs.argmax(1), det_probs.argmax(1))
    base = float(np.mean(exp_probs.argmax(1) == speaker.labels))
    shifts = {}
    for j in (3, 16, 128):
        mc = infer(net, speaker.frames, post, method, "montecarlo", j, RandomStream(100 + j))
        shifts[j] = abs(float(np.mean(mc.argmax(1) == speaker.labels)) - base)
    elapsed = time.perf_counter() - t0
    ok = exact and max(shifts.values()) < 0.005 and elapsed < 120
    detail = ", ".join(f"J={j}: {100 * s:.2f}%" for j, s in shifts.items())
    verdict("A4", ok, f"expectation exact: {exact}; accuracy shift {detail}; {elapsed:.1f}s")
    assert ok


# A5-A7 share one SI model per seed on the default corpus ------------------------

_CACHE = {}


def _contexts(cfg):
    """Seed contexts for ``cfg`` reusing cached corpora and SI models."""
    out = []
    for seed in SEEDS:
        if seed not in _CACHE:
            corpus = build_corpus(cfg, seed)
            _CACHE[seed] = (corpus, train_model(cfg, corpus, seed)[0])
        corpus, net = _CACHE[seed]
        out.append(SeedContext(cfg, seed, net=net, corpus=corpus))
    return out


def _run(cfg):
    return [adapt_and_score(ctx, spec, spk, b)
            for ctx in _contexts(cfg) for spec in cfg.methods for b in cfg.budgets for spk in ctx.corpus.test]


def _mean_by(rows, *keys):
    out = {}
    for r in rows:
        out.setdefault(tuple(getattr(r, k) for k in keys), []).append(r.frame_error_rate)
    return {k: float(np.mean(v)) for k, v in out.items()}


def test_a5_small_budget_trend(verdict):
    t0 = time.perf_counter()
    cfg = ExperimentConfig.from_dict({
        "methods": [
            {"name": "lhuc", "variant": "lhuc"},
            {"name": "blhuc", "variant": "lhuc", "bayes": True, "counterpart": "lhuc"},
            {"name": "hub", "variant": "hub"},
            {"name": "bhub", "variant": "hub", "bayes": True, "counterpart": "hub"},
            {"name": "pact", "variant": "pact"},
            {"name": "bpact", "variant": "pact", "bayes": True, "counterpart": "pact",
             "bayes_hyper": {"j_est": 4}},
        ],
        "budgets": [5], "seeds": SEEDS,
    })
    rows = _run(cfg)
    elapsed = time.perf_counter() - t0
    summary = {s["method"]: s for s in summarize(rows, {m.name: m.counterpart for m in cfg.methods})}
    parts, ordered, significant = [], True, False
    for base, label in (("lhuc", "LHUC"), ("hub", "HUB"), ("pact", "PAct")):
        b, d = summary["b" + base], summary[base]
        ordered &= b["mean_frame_error_rate"] <= d["mean_frame_error_rate"]
        significant |= b["p_value"] <= 0.05
        parts.append(f"B{label} {100 * b['mean_frame_error_rate']:.2f}% vs "
                     f"{100 * d['mean_frame_error_rate']:.2f}% (p={b['p_value']:.3g})")
    ok = ordered and significant and elapsed < 600
    verdict("A5", ok, "; ".join(parts) + f"; {elapsed:.0f}s")
    assert ok


def test_a6_layer_count_robustness(verdict):
    regime = {"learning_rate": 0.1, "epochs": 20, "max_change": 0.5}
    methods = []
    for n in range(1, 7):
        methods.append({"name": f"lhuc{n}", "variant": "lhuc", "layers": n, "hyper": regime})
        methods.append({"name": f"blhuc{n}", "variant": "lhuc", "layers": n, "bayes": True, "hyper": regime})
    cfg = ExperimentConfig.from_dict({"methods": methods, "budgets": [5], "seeds": SEEDS})
    per_seed = _mean_by(_run(cfg), "method", "seed")
    mean = {m: np.mean([per_seed[(m, s)] for s in SEEDS]) for m in {k[0] for k in per_seed}}
    lhuc_worse = sum(per_seed[("lhuc6", s)] > per_seed[("lhuc1", s)] for s in SEEDS)
    robust = mean["blhuc6"] <= mean["blhuc1"] + 0.01
    ok = robust and lhuc_worse >= 6
    curve = " ".join(f"{n}:{100 * mean[f'lhuc{n}']:.2f}/{100 * mean[f'blhuc{n}']:.2f}" for n in range(1, 7))
    verdict("A6", ok, f"BLHUC 6 layers {100 * mean['blhuc6']:.2f}% vs 1 layer {100 * mean['blhuc1']:.2f}%; "
                      f"LHUC worse with 6 layers on {lhuc_worse}/10 seeds; LHUC/BLHUC by layers {curve}")
    assert ok


def test_a7_budget_monotonicity(verdict):
    budgets = [5, 10, 20, 40, "all"]
    cfg = ExperimentConfig.from_dict({
        "methods": [{"name": "blhuc", "variant": "lhuc", "bayes": True}], "budgets": budgets, "seeds": SEEDS})
    mean = _mean_by(_run(cfg), "budget")
    curve = [mean[(b,)] for b in budgets]
    ok = all(b <= a + 0.005 for a, b in zip(curve, curve[1:]))
    verdict("A7", ok, "BLHUC error by budget " + ", ".join(f"{b}: {100 * e:.2f}%" for b, e in zip(budgets, curve)))
    assert ok


# A8-A10 -----------------------------------------------------------------------

def test_a8_lambda_rule(verdict):
    got = [default_lambda(n) for n in range(1, 15)]
    want = [min(10.0 ** (n - 5), 1.0) for n in range(1, 15)]
    ok = got == want
    verdict("A8", ok, f"default_lambda(1..14) = {got[:5]} then {got[5:]}")
    assert ok


def test_a9_significance_calibration(verdict):
    rng = np.random.default_rng(11)
    hits = 0
    for _ in range(200):
        rates = rng.uniform(2, 12, size=40)
        hits += matched_pairs_test(rng.poisson(rates), rng.poisson(rates)) <= 0.05
    rate = hits / 200
    p = matched_pairs_test(np.full(10, 3), np.full(10, 7))
    ok = 0.02 <= rate <= 0.09 and p == pytest.approx(0.002, abs=5e-5)
    verdict("A9", ok, f"null rejection rate {rate:.3f}; all-better p = {p:.5f}")
    assert ok


def test_a10_empirical_prior(verdict, toy):
    prior = empirical_prior([{0: np.array([v])} for v in (1.0, 2.0, 3.0)]).layers[0]
    mu_ok = prior.mu[0] == 2.0
    var_ok = prior.sigma[0] ** 2 == pytest.approx(np.var([1.0, 2.0, 3.0]), rel=1e-12)
    net, speaker = toy
    method = AdaptMethod("lhuc", (0, 1), "2sigmoid")
    hyper = AdaptHyper(epochs=3)
    emp = empirical_prior([adapt_min_ce(net, spk, method, hyper, stream=None)
                           for spk in [speaker.first_utterances(n) for n in (2, 4, 6)]])
    plain = adapt_min_ce(net, speaker, method, hyper)
    mapped = adapt_min_ce(net, speaker, method, hyper, MAPRegularizer(emp, 0.0))
    exact = all(np.array_equal(plain[k], mapped[k]) for k in plain)
    ok = mu_ok and var_ok and exact
    verdict("A10", ok, f"mu0={prior.mu[0]}, sigma0^2={prior.sigma[0] ** 2:.12f}; "
                       f"MAP weight 0 equals plain adaptation: {exact}")
    assert ok
