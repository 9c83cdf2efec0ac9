import json

import numpy as np
import pytest

from bayesadapt.adapt_bayes import Posterior, PriorSpec, empirical_prior
from bayesadapt.adapt_det import AdaptMethod
from bayesadapt.formats import (
    FormatError,
    load_corpus,
    load_network,
    load_posterior,
    load_prior,
    load_sd_params,
    save_corpus,
    save_network,
    save_posterior,
    save_prior,
    save_sd_params,
)
from bayesadapt.numerics import GaussianSpec


def test_network_round_trip(tmp_path, small_net):
    save_network(tmp_path / "net.json", small_net)
    assert load_network(tmp_path / "net.json").equals(small_net)


def test_network_header_checked(tmp_path, small_net):
    path = tmp_path / "net.json"
    save_network(path, small_net)
    obj = json.loads(path.read_text())
    obj["version"] = 99
    path.write_text(json.dumps(obj))
    with pytest.raises(FormatError):
        load_network(path)
    save_sd_params(tmp_path / "sd.json", "s", AdaptMethod("lhuc", (0,)), {0: np.ones(6)})
    with pytest.raises(FormatError):
        load_network(tmp_path / "sd.json")


def test_sd_params_round_trip(tmp_path):
    m = AdaptMethod("lhn", (1,))
    params = {1: np.random.default_rng(0).normal(size=(4, 4))}
    save_sd_params(tmp_path / "sd.json", "test003", m, params)
    sid, m2, p2 = load_sd_params(tmp_path / "sd.json")
    assert sid == "test003" and m2 == m
    np.testing.assert_array_equal(p2[1], params[1])


@pytest.mark.parametrize("tied", [True, False])
def test_posterior_round_trip(tmp_path, tied):
    rng = np.random.default_rng(1)
    sigma = 0.123456789 if tied else rng.random(3)
    post = Posterior({0: GaussianSpec(rng.normal(size=3), sigma), 2: GaussianSpec(rng.normal(size=3), sigma)})
    m = AdaptMethod("lhuc", (0, 2), "2sigmoid")
    save_posterior(tmp_path / "q.json", "spk", m, post)
    sid, m2, back = load_posterior(tmp_path / "q.json")
    assert sid == "spk" and m2 == m and back.tied == tied
    for k in (0, 2):
        np.testing.assert_array_equal(back.layers[k].mu, post.layers[k].mu)
        np.testing.assert_array_equal(back.layers[k].sigma, post.layers[k].sigma)


def test_prior_round_trip(tmp_path):
    prior = empirical_prior([{0: np.array([1.0, 2.0])}, {0: np.array([3.0, 5.0])}])
    save_prior(tmp_path / "p.json", prior)
    back = load_prior(tmp_path / "p.json")
    assert back.source == "empirical"
    np.testing.assert_array_equal(back.layers[0].mu, prior.layers[0].mu)
    np.testing.assert_array_equal(back.layers[0].sigma, prior.layers[0].sigma)


def test_corpus_round_trip(tmp_path, tiny_corpus):
    save_corpus(tmp_path / "c.npz", tiny_corpus)
    back = load_corpus(tmp_path / "c.npz")
    assert back.config == tiny_corpus.config and back.seed == tiny_corpus.seed
    for a, b in zip(tiny_corpus.train + tiny_corpus.test, back.train + back.test):
        assert a.speaker_id == b.speaker_id
        np.testing.assert_array_equal(a.frames, b.frames)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.utt_bounds, b.utt_bounds)
        np.testing.assert_array_equal(tiny_corpus.transforms[a.speaker_id].diag_scale,
                                      back.transforms[a.speaker_id].diag_scale)
    np.testing.assert_array_equal(back.classes.means, tiny_corpus.classes.means)


def test_corpus_is_plain_npz(tmp_path, tiny_corpus):
    # readable without this package: header is UTF-8 JSON bytes
    save_corpus(tmp_path / "c.npz", tiny_corpus)
    with np.load(tmp_path / "c.npz") as z:
        header = json.loads(bytes(z["header"]).decode("utf-8"))
        assert header["format"] == "bayesadapt-corpus"
        assert z["train000.frames"].shape == (8 * 15, 6)
