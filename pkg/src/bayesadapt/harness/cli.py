"""Command line entry point: ``bayesadapt <subcommand> [--config FILE] [--set key=value ...]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..adapt_bayes import adapt_bayes, infer
from ..adapt_det import adapt_min_ce, make_adaptor, supervise
from ..datagen import budget_split, generate_corpus, GenConfig
from ..formats import (
    FormatError,
    load_corpus,
    load_network,
    load_posterior,
    load_sd_params,
    save_corpus,
    save_network,
    save_posterior,
    save_sd_params,
)
from ..network import DivergenceError, forward, frame_errors
from ..numerics import OracleFailure, RandomStream, derive_seed
from .config import ConfigError, ExperimentConfig, load_config
from .report import emit_report, parse_report, summarize
from .sweep import (
    SeedContext,
    _adapt_hyper,
    _bayes_hyper,
    _regularizer,
    build_corpus,
    resolve_method,
    run_sweep,
    train_model,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2
EXIT_IO = 3

log = logging.getLogger("bayesadapt")


def _out_path(cfg: ExperimentConfig, given, default_name: str) -> Path:
    if given:
        return Path(given)
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    return out / default_name


def _seed(cfg: ExperimentConfig, args) -> int:
    return args.seed if args.seed is not None else cfg.seeds[0]


def _corpus(cfg, args, seed):
    if getattr(args, "corpus", None):
        return load_corpus(args.corpus)
    return build_corpus(cfg, seed)


def _method_spec(cfg: ExperimentConfig, name):
    if name is None:
        if len(cfg.methods) != 1:
            raise ConfigError("--method is required when the config lists several methods")
        return cfg.methods[0]
    for spec in cfg.methods:
        if spec.name == name:
            return spec
    raise ConfigError(f"no method named {name!r} in the config")


def cmd_gen_data(cfg, args):
    seed = _seed(cfg, args)
    corpus = generate_corpus(GenConfig.from_dict(cfg.corpus.get("gen", {})), seed)
    path = _out_path(cfg, args.out, f"corpus_seed{seed}.npz")
    save_corpus(path, corpus)
    print(path)


def _train(cfg, args, sat):
    seed = _seed(cfg, args)
    corpus = _corpus(cfg, args, seed)
    net, state = train_model(cfg, corpus, seed, sat=sat)
    path = _out_path(cfg, args.out, f"{'sat' if sat else 'si'}_seed{seed}.json")
    save_network(path, net)
    print(path)
    if state is not None:
        sd_dir = path.with_name(path.stem + "_speakers")
        sd_dir.mkdir(exist_ok=True)
        from .sweep import sat_method

        method = sat_method(cfg, net.config)
        for sid, params in sorted(state.speaker_params.items()):
            save_sd_params(sd_dir / f"{sid}.json", sid, method, params)


def cmd_train_si(cfg, args):
    _train(cfg, args, sat=False)


def cmd_train_sat(cfg, args):
    if not cfg.sat:
        cfg.sat = {}
    _train(cfg, args, sat=True)


def _speaker(corpus, speaker_id):
    try:
        return corpus.speaker(speaker_id)
    except KeyError as exc:
        raise ConfigError(f"unknown speaker {speaker_id!r}") from exc


def cmd_adapt(cfg, args):
    seed = _seed(cfg, args)
    net = load_network(args.net)
    ctx = SeedContext(cfg, seed, net=net, corpus=_corpus(cfg, args, seed))
    spec = _method_spec(cfg, args.method)
    method = resolve_method(spec, net)
    if method is None:
        raise ConfigError("the unadapted method has nothing to estimate")
    speaker = _speaker(ctx.corpus, args.speaker)
    budget = args.budget if args.budget is not None else cfg.budgets[0]
    adapt_set, _ = budget_split(speaker, budget, cfg.split)
    hyper = _adapt_hyper(spec, cfg.supervision)
    adapt_set = supervise(net, adapt_set, hyper.supervision, stay_prob=cfg.stay_prob)
    stream = RandomStream(derive_seed(seed, spec.name, str(budget), speaker.speaker_id))
    path = _out_path(cfg, args.out, f"{spec.name}_{speaker.speaker_id}.json")
    if spec.bayes:
        posterior, bounds = adapt_bayes(net, adapt_set, method, ctx.prior_for(spec, method),
                                        _bayes_hyper(spec, hyper), stream)
        save_posterior(path, speaker.speaker_id, method, posterior)
    else:
        params = adapt_min_ce(net, adapt_set, method, hyper, _regularizer(spec, ctx, method), stream)
        save_sd_params(path, speaker.speaker_id, method, params)
    print(path)


def cmd_infer(cfg, args):
    seed = _seed(cfg, args)
    net = load_network(args.net)
    corpus = _corpus(cfg, args, seed)
    if args.params is None:
        speaker = _speaker(corpus, args.speaker)
        probs = forward(net, speaker.frames).probs
    else:
        record = json.loads(Path(args.params).read_text(encoding="utf-8"))
        if record.get("format") == "bayesadapt-posterior":
            sid, method, posterior = load_posterior(args.params)
            speaker = _speaker(corpus, args.speaker or sid)
            stream = RandomStream(derive_seed(seed, "infer", speaker.speaker_id))
            probs = infer(net, speaker.frames, posterior, method, args.inference, args.samples, stream)
        else:
            sid, method, params = load_sd_params(args.params)
            speaker = _speaker(corpus, args.speaker or sid)
            probs = forward(net, speaker.frames, make_adaptor(method, params)).probs
    wrong = frame_errors(probs, speaker.labels)
    result = {"speaker_id": speaker.speaker_id, "frame_error_rate": float(wrong.mean()), "num_frames": int(wrong.size)}
    if args.out:
        np.save(args.out, probs)
    print(json.dumps(result))


def cmd_sweep(cfg, args):
    out = _out_path(cfg, args.out, "report." + ("csv" if cfg.output.get("format", "csv") == "csv" else "json"))
    rows = run_sweep(cfg)
    counterparts = {m.name: m.counterpart for m in cfg.methods if m.counterpart}
    summary = emit_report(rows, out, cfg.output.get("format", "csv"), counterparts,
                          bool(cfg.output.get("report_timing", False)))
    for entry in summary:
        log.info("%s", json.dumps(entry))
    print(out)
    if any(r.status != "ok" for r in rows):
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_report(cfg, args):
    rows = parse_report(args.report)
    counterparts = {m.name: m.counterpart for m in cfg.methods if m.counterpart}
    print(json.dumps({"summary": summarize(rows, counterparts)}, indent=2))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-si": cmd_train_si,
    "train-sat": cmd_train_sat,
    "adapt": cmd_adapt,
    "infer": cmd_infer,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bayesadapt", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. --set train.epochs=5 (repeatable)")
        p.add_argument("--seed", type=int, help="seed (defaults to the first configured seed)")
        return p

    p = add("gen-data", "generate a synthetic corpus")
    p.add_argument("--out")
    for name in ("train-si", "train-sat"):
        p = add(name, "train the " + ("speaker adaptive" if name == "train-sat" else "speaker independent") + " model")
        p.add_argument("--corpus")
        p.add_argument("--out")
    p = add("adapt", "adapt to one test speaker")
    p.add_argument("--net", required=True)
    p.add_argument("--corpus")
    p.add_argument("--speaker", required=True)
    p.add_argument("--method")
    p.add_argument("--budget", type=lambda s: s if s == "all" else int(s))
    p.add_argument("--out")
    p = add("infer", "score a speaker with an optional SD parameter or posterior file")
    p.add_argument("--net", required=True)
    p.add_argument("--corpus")
    p.add_argument("--speaker")
    p.add_argument("--params")
    p.add_argument("--inference", choices=("expectation", "montecarlo"), default="expectation")
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--out", help="optional .npy file for the posteriors")
    p = add("sweep", "run a method x budget x seed sweep and write the report")
    p.add_argument("--out")
    p = add("report", "summarize an existing report")
    p.add_argument("report")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.overrides) if args.command not in ("gen-data", "train-si", "train-sat", "report") \
            else _load_lenient(args)
        if args.command == "infer" and args.params is None and args.speaker is None:
            raise ConfigError("infer needs --speaker or --params")
        code = COMMANDS[args.command](cfg, args)
        return EXIT_OK if code is None else code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, OracleFailure, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def _load_lenient(args) -> ExperimentConfig:
    """Commands that need no methods get a placeholder so validation passes."""
    from .config import apply_override

    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from exc
    for item in args.overrides:
        apply_override(raw, item)
    raw.setdefault("methods", [{"name": "si"}])
    if not raw["methods"]:
        raw["methods"] = [{"name": "si"}]
    return ExperimentConfig.from_dict(raw)


if __name__ == "__main__":
    sys.exit(main())
