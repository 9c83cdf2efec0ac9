"""Adapt test speakers with LHUC and Bayesian LHUC.

Trains an SI model on a synthetic corpus. For each test speaker it decodes
the first five utterances into pseudo labels, adapts on them and compares
the frame error of the unadapted model, LHUC and BLHUC on the whole speaker.

    python demos/quickstart.py
"""
import numpy as np

from bayesadapt import (
    AdaptHyper,
    AdaptMethod,
    BayesHyper,
    GenConfig,
    NetworkConfig,
    RandomStream,
    TrainConfig,
    adapt_bayes,
    adapt_min_ce,
    budget_split,
    fixed_prior,
    forward,
    generate_corpus,
    infer,
    pseudo_label,
    train_si,
)
from bayesadapt.adapt_det import make_adaptor


def error(probs, labels):
    return float(np.mean(probs.argmax(axis=1) != labels))


gen = GenConfig(train_speakers=30, test_speakers=5, utterances_per_speaker=30)
corpus = generate_corpus(gen, seed=0)
net_cfg = NetworkConfig(gen.feature_dim, (128, 128, 128, 128), gen.num_classes)
net, losses = train_si(corpus.train, net_cfg, TrainConfig(epochs=10), RandomStream(1))
print(f"SI training: {len(losses)} epochs, final loss {losses[-1]:.3f}")

method = AdaptMethod("lhuc", tuple(range(4)), "2sigmoid")
for speaker in corpus.test:
    adapt_set, eval_set = budget_split(speaker, 5)
    # unsupervised: labels come from the SI model's own Viterbi decode
    decoded = adapt_set.with_labels(pseudo_label(net, adapt_set.frames, "viterbi", utt_bounds=adapt_set.utt_bounds))

    si = error(forward(net, eval_set.frames).probs, eval_set.labels)
    params = adapt_min_ce(net, decoded, method, AdaptHyper())
    lhuc = error(forward(net, eval_set.frames, make_adaptor(method, params)).probs, eval_set.labels)
    post, bounds = adapt_bayes(net, decoded, method, fixed_prior(method, net), BayesHyper(), RandomStream(2))
    blhuc = error(infer(net, eval_set.frames, post, method), eval_set.labels)
    sigmas = ", ".join(f"{post.layers[k].sigma:.3f}" for k in method.layers)
    print(f"{speaker.speaker_id}: SI {100 * si:.1f}%  LHUC {100 * lhuc:.1f}%  BLHUC {100 * blhuc:.1f}%"
          f"  (posterior sigma per layer: {sigmas})")
