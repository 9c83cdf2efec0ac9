"""Deterministic vs Bayesian LHUC as more layers are adapted.

Runs the sweep described in ``layer_sweep.json`` through the harness and
prints the per-system summary. With five adaptation utterances and an
aggressive learning rate, adapting all four layers makes LHUC worse than
adapting one, while BLHUC loses much less. With every utterance available
both gain from the extra layers. The same sweep runs from the command line:

    bayesadapt sweep --config demos/layer_sweep.json
"""
from pathlib import Path

from bayesadapt.harness.config import load_config
from bayesadapt.harness.report import summarize
from bayesadapt.harness.sweep import run_sweep

cfg = load_config(Path(__file__).with_name("layer_sweep.json"))
rows = run_sweep(cfg)
for s in summarize(rows, {m.name: m.counterpart for m in cfg.methods}):
    p = "" if s["p_value"] is None else f"  p vs {s['counterpart']} = {s['p_value']:.3g}"
    print(f"{s['method']:>7} budget {str(s['budget']):>3}: {100 * s['mean_frame_error_rate']:.2f}%{p}")
