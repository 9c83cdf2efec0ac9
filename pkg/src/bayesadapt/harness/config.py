"""Experiment configuration: a single JSON document plus dotted overrides."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

OUTPUT_DIR_ENV = "BAYESADAPT_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


DEFAULTS: Dict[str, Any] = {
    "corpus": {"path": None, "gen": {}},
    "network": {"hidden_dims": [128, 128, 128, 128, 128, 128], "path": None},
    "train": {},
    "sat": None,
    "methods": [],
    "budgets": [5],
    "seeds": [0],
    "split": "adapt-on-eval",
    "supervision": "viterbi",
    "stay_prob": 0.875,
    "test_speakers": None,
    "jobs": 1,
    "output": {"dir": None, "format": "csv", "report_timing": False},
}


@dataclass
class MethodSpec:
    """One adaptation system in a sweep.

    ``variant`` is ``none`` for the unadapted model. ``layers`` is a list of
    hidden layer indices, ``"all"``, ``"first"`` or an integer ``n`` for the
    first ``n`` layers; when omitted, PAct and LHN use the first hidden layer
    and LHUC/HUB use all of them. The activation defaults to 2sigmoid for
    LHUC and tanh for HUB.
    """

    name: str
    variant: str = "none"
    bayes: bool = False
    activation: Optional[str] = None
    layers: Any = None
    regularizer: Optional[dict] = None
    hyper: dict = field(default_factory=dict)
    bayes_hyper: dict = field(default_factory=dict)
    prior: Any = "fixed"
    counterpart: Optional[str] = None

    @classmethod
    def from_dict(cls, d: dict) -> "MethodSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown method keys {sorted(unknown)}")
        if "name" not in d:
            raise ConfigError("every method needs a name")
        spec = cls(**d)
        spec.validate()
        return spec

    def validate(self):
        from ..adapt_det import _ALLOWED_ACTIVATIONS, Activation, Variant

        if self.variant == "none":
            return
        try:
            variant = Variant(self.variant)
            activation = Activation(self.activation) if self.activation else None
        except ValueError as exc:
            raise ConfigError(f"method {self.name}: {exc}") from exc
        if activation is not None and activation not in _ALLOWED_ACTIVATIONS[variant]:
            raise ConfigError(f"method {self.name}: {activation.value} is not valid for {variant.value}")
        if self.regularizer and self.regularizer.get("kind") not in ("map", "kl-output", "noisy"):
            raise ConfigError(f"method {self.name}: unknown regularizer {self.regularizer.get('kind')!r}")
        if self.bayes and self.regularizer:
            raise ConfigError(f"method {self.name}: Bayesian methods take no extra regularizer")
        if not (isinstance(self.prior, dict) or self.prior in ("fixed", "empirical")):
            raise ConfigError(f"method {self.name}: prior must be fixed, empirical or a mapping")


@dataclass
class ExperimentConfig:
    corpus: dict
    network: dict
    train: dict
    sat: Optional[dict]
    methods: List[MethodSpec]
    budgets: list
    seeds: List[int]
    split: str
    supervision: str
    stay_prob: float
    test_speakers: Optional[int]
    jobs: int
    output: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        unknown = set(raw) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        merged = deep_merge(copy.deepcopy(DEFAULTS), raw)
        try:
            methods = [MethodSpec.from_dict(m) for m in merged["methods"]]
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        merged["methods"] = methods
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    def validate(self):
        if not self.methods:
            raise ConfigError("at least one method is required")
        if not self.budgets:
            raise ConfigError("at least one budget is required")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise ConfigError("method names must be unique")
        for b in self.budgets:
            if b != "all" and (not isinstance(b, int) or b < 1):
                raise ConfigError(f"invalid budget {b!r}")
        if self.split not in ("adapt-on-eval", "disjoint"):
            raise ConfigError(f"invalid split {self.split!r}")
        if self.output.get("format", "csv") not in ("csv", "json"):
            raise ConfigError("output.format must be csv or json")

    def output_dir(self) -> Path:
        return Path(self.output.get("dir") or os.environ.get(OUTPUT_DIR_ENV) or ".")


def deep_merge(base: dict, extra: dict) -> dict:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key] = deep_merge(base[key], value)
        else:
            base[key] = value
    return base


def apply_override(raw: dict, assignment: str) -> dict:
    """Apply ``dotted.key=value``; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, text = assignment.split("=", 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    node = raw
    parts = key.split(".")
    for part in parts[:-1]:
        if part.isdigit() and isinstance(node, list):
            node = node[int(part)]
            continue
        if node.get(part) is None:
            node[part] = {}
        node = node[part]
    last = parts[-1]
    if isinstance(node, list) and last.isdigit():
        node[int(last)] = value
    else:
        node[last] = value
    return raw


def load_config(path=None, overrides=()) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    for item in overrides:
        apply_override(raw, item)
    return ExperimentConfig.from_dict(raw)
