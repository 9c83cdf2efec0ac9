"""Synthetic multi-speaker frame classification corpus.

Each speaker applies a diagonal affine distortion ``x = scale * g + bias`` to
class-conditional Gaussian frames ``g``, so per-dimension scaling and offset
transforms have a realisable ideal solution at the input side.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .network import LabeledFrames
from .numerics import RandomStream, derive_seed


@dataclass
class GenConfig:
    num_classes: int = 20
    feature_dim: int = 24
    train_speakers: int = 50
    test_speakers: int = 10
    utterances_per_speaker: int = 40
    frames_per_utterance: int = 50
    mean_segment_frames: float = 8.0
    class_separation: float = 0.8
    class_std: float = 1.0
    class_std_jitter: float = 0.25
    class_prior: Optional[List[float]] = None
    distortion_scale_range: Tuple[float, float] = (-0.35, 0.35)
    distortion_bias_std: float = 0.35
    test_distortion_gain: float = 2.5

    def __post_init__(self):
        counts = (self.num_classes, self.feature_dim, self.train_speakers, self.test_speakers,
                  self.utterances_per_speaker, self.frames_per_utterance)
        if min(counts) < 1:
            raise ValueError("all counts must be >= 1")
        lo, hi = self.distortion_scale_range
        if lo > hi:
            raise ValueError("distortion_scale_range must be (low, high)")
        if self.class_std <= 0:
            raise ValueError("degenerate class covariance")
        if self.class_prior is not None:
            p = np.asarray(self.class_prior, dtype=float)
            if p.shape != (self.num_classes,) or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
                raise ValueError("class_prior must be a distribution over classes")
        self.distortion_scale_range = (float(lo), float(hi))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distortion_scale_range"] = list(self.distortion_scale_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        if "distortion_scale_range" in d:
            d["distortion_scale_range"] = tuple(d["distortion_scale_range"])
        return cls(**d)

    @property
    def prior(self) -> np.ndarray:
        if self.class_prior is None:
            return np.full(self.num_classes, 1.0 / self.num_classes)
        return np.asarray(self.class_prior, dtype=float)


@dataclass
class SpeakerTransform:
    diag_scale: np.ndarray
    bias: np.ndarray

    def apply(self, g):
        return self.diag_scale * g + self.bias

    def invert(self, x):
        return (x - self.bias) / self.diag_scale


@dataclass
class ClassModel:
    means: np.ndarray
    stds: np.ndarray


@dataclass
class Corpus:
    config: GenConfig
    seed: int
    classes: ClassModel
    train: List[LabeledFrames]
    test: List[LabeledFrames]
    transforms: Dict[str, SpeakerTransform]

    def speaker(self, speaker_id: str) -> LabeledFrames:
        for spk in self.train + self.test:
            if spk.speaker_id == speaker_id:
                return spk
        raise KeyError(speaker_id)


def _class_model(cfg: GenConfig, stream: RandomStream) -> ClassModel:
    means = stream.normal((cfg.num_classes, cfg.feature_dim)) * cfg.class_separation
    # keep classes pairwise distinct even for tiny separations
    for _ in range(10):
        d = np.linalg.norm(means[:, None] - means[None], axis=-1) + np.eye(cfg.num_classes)
        if d.min() > 1e-6:
            break
        means = means + 1e-3 * stream.normal(means.shape)
    jitter = np.exp(cfg.class_std_jitter * stream.normal((cfg.num_classes, cfg.feature_dim)))
    return ClassModel(means, cfg.class_std * jitter)


def _speaker_transform(cfg: GenConfig, stream: RandomStream, gain: float) -> SpeakerTransform:
    lo, hi = cfg.distortion_scale_range
    log_scale = stream.uniform(cfg.feature_dim, lo, hi) * gain
    bias = stream.normal(cfg.feature_dim) * cfg.distortion_bias_std * gain
    return SpeakerTransform(np.exp(log_scale), bias)


def _speaker_data(cfg, classes, transform, speaker_id, stream) -> LabeledFrames:
    n_utt, n_frm = cfg.utterances_per_speaker, cfg.frames_per_utterance
    n = n_utt * n_frm
    # classes persist over geometric-length segments, restarting at utterance starts
    starts = stream.uniform(n) < 1.0 / max(cfg.mean_segment_frames, 1.0)
    starts[::n_frm] = True
    seg_classes = np.searchsorted(np.cumsum(cfg.prior), stream.uniform(n), side="right")
    seg_classes = np.minimum(seg_classes, cfg.num_classes - 1)
    labels = seg_classes[np.maximum.accumulate(np.where(starts, np.arange(n), 0))]
    g = classes.means[labels] + classes.stds[labels] * stream.normal((n, cfg.feature_dim))
    return LabeledFrames(transform.apply(g), labels.astype(np.int64), np.arange(n_utt + 1) * n_frm, speaker_id)


def generate_corpus(cfg: GenConfig, seed: int) -> Corpus:
    """Deterministic corpus for ``(cfg, seed)``.

    Every speaker draws from its own stream derived from ``seed`` and its id,
    so changing the number of speakers leaves existing speakers unchanged.
    """
    classes = _class_model(cfg, RandomStream(derive_seed(seed, "classes")))
    train, test, transforms = [], [], {}
    for prefix, count, gain, out in (("train", cfg.train_speakers, 1.0, train),
                                     ("test", cfg.test_speakers, cfg.test_distortion_gain, test)):
        for i in range(count):
            sid = f"{prefix}{i:03d}"
            stream = RandomStream(derive_seed(seed, "speaker", sid))
            tf = _speaker_transform(cfg, stream, gain)
            transforms[sid] = tf
            out.append(_speaker_data(cfg, classes, tf, sid, stream))
    return Corpus(cfg, int(seed), classes, train, test, transforms)


def budget_split(speaker: LabeledFrames, n_utterances, mode: str = "adapt-on-eval"):
    """Adaptation set of the first ``n`` utterances and the evaluation set.

    ``n`` may be ``"all"``. In ``adapt-on-eval`` mode the evaluation set is
    the whole speaker; in ``disjoint`` mode it is the remaining utterances.
    """
    total = speaker.num_utterances
    n = total if n_utterances == "all" else int(n_utterances)
    if not 1 <= n <= total:
        raise ValueError(f"budget {n_utterances} outside 1..{total}")
    adapt = speaker.first_utterances(n)
    if mode == "adapt-on-eval":
        return adapt, speaker
    if mode == "disjoint":
        if n == total:
            raise ValueError("disjoint split leaves no evaluation utterances")
        start = int(speaker.utt_bounds[n])
        bounds = speaker.utt_bounds[n:] - start
        return adapt, LabeledFrames(speaker.frames[start:], speaker.labels[start:], bounds, speaker.speaker_id)
    raise ValueError(f"unknown split mode {mode!r}")
