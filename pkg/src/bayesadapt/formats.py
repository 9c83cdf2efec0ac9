"""File formats: model checkpoints, SD parameter / posterior / prior records
and corpus containers. See ``docs/formats.md`` for the field-level layout."""
from __future__ import annotations

import io
import json
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .adapt_bayes import Posterior, PriorSpec
from .adapt_det import Activation, AdaptMethod, SdParams, Variant
from .datagen import ClassModel, Corpus, GenConfig, SpeakerTransform
from .network import LabeledFrames, Network, NetworkConfig
from .numerics import GaussianSpec

CHECKPOINT_FORMAT = "bayesadapt-network"
SDPARAMS_FORMAT = "bayesadapt-sdparams"
POSTERIOR_FORMAT = "bayesadapt-posterior"
PRIOR_FORMAT = "bayesadapt-prior"
CORPUS_FORMAT = "bayesadapt-corpus"
VERSION = 1


class FormatError(ValueError):
    pass


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path, fmt):
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if obj.get("format") != fmt:
        raise FormatError(f"{path}: expected format {fmt!r}, found {obj.get('format')!r}")
    if obj.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported version {obj.get('version')!r}")
    return obj


def _array(values, shape=None):
    arr = np.asarray(values, dtype=float)
    return arr.reshape(shape) if shape is not None else arr


def method_to_dict(method: AdaptMethod) -> dict:
    return {"variant": method.variant.value, "layers": list(method.layers), "activation": method.activation.value}


def method_from_dict(d: dict) -> AdaptMethod:
    return AdaptMethod(Variant(d["variant"]), tuple(d["layers"]), Activation(d.get("activation", "identity")))


def save_network(path, net: Network):
    cfg = net.config
    _write_json(path, {
        "format": CHECKPOINT_FORMAT,
        "version": VERSION,
        "config": {"input_dim": cfg.input_dim, "hidden_dims": list(cfg.hidden_dims),
                   "num_classes": cfg.num_classes, "activation": cfg.activation},
        "layers": [{"shape": list(w.shape), "weight": w.reshape(-1).tolist(), "bias": b.tolist()}
                   for w, b in zip(net.weights, net.biases)],
    })


def load_network(path) -> Network:
    obj = _read_json(path, CHECKPOINT_FORMAT)
    c = obj["config"]
    cfg = NetworkConfig(c["input_dim"], tuple(c["hidden_dims"]), c["num_classes"], c.get("activation", "relu"))
    weights = [_array(layer["weight"], tuple(layer["shape"])) for layer in obj["layers"]]
    biases = [_array(layer["bias"]) for layer in obj["layers"]]
    net = Network(cfg, weights, biases)
    net.check()
    return net


def save_sd_params(path, speaker_id: str, method: AdaptMethod, params: SdParams):
    _write_json(path, {
        "format": SDPARAMS_FORMAT,
        "version": VERSION,
        "speaker_id": speaker_id,
        "method": method_to_dict(method),
        "layers": {str(k): {"shape": list(v.shape), "values": v.reshape(-1).tolist()} for k, v in params.items()},
    })


def load_sd_params(path) -> Tuple[str, AdaptMethod, SdParams]:
    obj = _read_json(path, SDPARAMS_FORMAT)
    params = {int(k): _array(v["values"], tuple(v["shape"])) for k, v in obj["layers"].items()}
    return obj["speaker_id"], method_from_dict(obj["method"]), params


def _gauss_to_dict(spec: GaussianSpec, mu_key="mu", sigma_key="sigma") -> dict:
    return {mu_key: spec.mu.tolist(), sigma_key: spec.sigma if spec.tied else spec.sigma.tolist(), "tied": spec.tied}


def _gauss_from_dict(d: dict, mu_key="mu", sigma_key="sigma") -> GaussianSpec:
    sigma = d[sigma_key]
    return GaussianSpec(_array(d[mu_key]), float(sigma) if d.get("tied") else _array(sigma))


def save_posterior(path, speaker_id: str, method: AdaptMethod, posterior: Posterior):
    _write_json(path, {
        "format": POSTERIOR_FORMAT,
        "version": VERSION,
        "speaker_id": speaker_id,
        "method": method_to_dict(method),
        "layers": {str(k): _gauss_to_dict(q) for k, q in posterior.layers.items()},
    })


def load_posterior(path) -> Tuple[str, AdaptMethod, Posterior]:
    obj = _read_json(path, POSTERIOR_FORMAT)
    layers = {int(k): _gauss_from_dict(v) for k, v in obj["layers"].items()}
    return obj["speaker_id"], method_from_dict(obj["method"]), Posterior(layers)


def save_prior(path, prior: PriorSpec):
    _write_json(path, {
        "format": PRIOR_FORMAT,
        "version": VERSION,
        "source": prior.source,
        "layers": {str(k): _gauss_to_dict(p, "mu0", "sigma0") for k, p in prior.layers.items()},
    })


def load_prior(path) -> PriorSpec:
    obj = _read_json(path, PRIOR_FORMAT)
    layers = {int(k): _gauss_from_dict(v, "mu0", "sigma0") for k, v in obj["layers"].items()}
    return PriorSpec(layers, obj.get("source", "fixed"))


def save_corpus(path, corpus: Corpus):
    """Write a corpus as an uncompressed ``.npz`` archive."""
    header = {
        "format": CORPUS_FORMAT,
        "version": VERSION,
        "seed": corpus.seed,
        "config": corpus.config.to_dict(),
        "train": [s.speaker_id for s in corpus.train],
        "test": [s.speaker_id for s in corpus.test],
    }
    arrays = {
        "header": np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8),
        "class_means": corpus.classes.means,
        "class_stds": corpus.classes.stds,
    }
    for spk in corpus.train + corpus.test:
        sid = spk.speaker_id
        tf = corpus.transforms[sid]
        arrays[f"{sid}.frames"] = spk.frames
        arrays[f"{sid}.labels"] = spk.labels.astype(np.int64)
        arrays[f"{sid}.utt_bounds"] = spk.utt_bounds.astype(np.int64)
        arrays[f"{sid}.scale"] = tf.diag_scale
        arrays[f"{sid}.bias"] = tf.bias
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_corpus(path) -> Corpus:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(bytes(z["header"]).decode("utf-8"))
        if header.get("format") != CORPUS_FORMAT or header.get("version") != VERSION:
            raise FormatError(f"{path}: not a version {VERSION} corpus file")
        cfg = GenConfig.from_dict(header["config"])
        classes = ClassModel(z["class_means"], z["class_stds"])
        transforms = {}

        def speakers(ids):
            out = []
            for sid in ids:
                out.append(LabeledFrames(z[f"{sid}.frames"], z[f"{sid}.labels"], z[f"{sid}.utt_bounds"], sid))
                transforms[sid] = SpeakerTransform(z[f"{sid}.scale"], z[f"{sid}.bias"])
            return out

        train = speakers(header["train"])
        test = speakers(header["test"])
    return Corpus(cfg, header["seed"], classes, train, test, transforms)
