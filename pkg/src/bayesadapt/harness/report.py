"""Report emission: CSV or JSON rows plus a per-(method, budget) summary."""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .stats import matched_pairs_test
from .sweep import ResultRow

CSV_COLUMNS = ("method", "budget", "seed", "speaker_id", "frame_error_rate", "num_frames", "wallclock_ms")


def _budget_text(budget) -> str:
    return str(budget)


def _budget_value(text: str):
    return int(text) if text.isdigit() else text


def _float_text(x: float) -> str:
    return repr(float(x))


def summarize(rows: Sequence[ResultRow], counterparts: Optional[Dict[str, str]] = None) -> List[dict]:
    """Mean and sample standard deviation of per-speaker error rates per
    (method, budget), with the matched-pairs p-value against the
    counterpart method when one is named.

    Utterances are paired by (seed, speaker, utterance index). Failed rows
    are counted but excluded from the statistics.
    """
    counterparts = counterparts or {}
    groups: Dict[tuple, List[ResultRow]] = {}
    for row in rows:
        groups.setdefault((row.method, row.budget), []).append(row)
    out = []
    for (method, budget), members in groups.items():
        ok = [r for r in members if r.status == "ok"]
        rates = np.array([r.frame_error_rate for r in ok])
        entry = {
            "method": method,
            "budget": budget,
            "count": len(ok),
            "failed": len(members) - len(ok),
            "mean_frame_error_rate": float(rates.mean()) if ok else None,
            "std_frame_error_rate": float(rates.std(ddof=1)) if len(ok) > 1 else 0.0 if ok else None,
            "counterpart": counterparts.get(method),
            "p_value": None,
        }
        other = counterparts.get(method)
        if other is not None and (other, budget) in groups:
            mine = {(r.seed, r.speaker_id): r for r in ok}
            theirs = {(r.seed, r.speaker_id): r for r in groups[(other, budget)] if r.status == "ok"}
            keys = sorted(set(mine) & set(theirs))
            a = [e for k in keys for e in mine[k].utterance_errors]
            b = [e for k in keys for e in theirs[k].utterance_errors]
            if a and len(a) == len(b):
                entry["p_value"] = matched_pairs_test(a, b)
        out.append(entry)
    return out


def rows_to_csv(rows: Iterable[ResultRow], report_timing: bool = False) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        wall = _float_text(r.wallclock_ms) if report_timing else "0"
        writer.writerow([r.method, _budget_text(r.budget), r.seed, r.speaker_id,
                         _float_text(r.frame_error_rate), r.num_frames, wall])
    return buf.getvalue()


def _row_to_dict(r: ResultRow, report_timing: bool) -> dict:
    return {
        "method": r.method,
        "budget": r.budget,
        "seed": r.seed,
        "speaker_id": r.speaker_id,
        "frame_error_rate": None if math.isnan(r.frame_error_rate) else r.frame_error_rate,
        "num_frames": r.num_frames,
        "utterance_errors": list(r.utterance_errors),
        "wallclock_ms": r.wallclock_ms if report_timing else 0.0,
        "status": r.status,
    }


def _row_from_dict(d: dict) -> ResultRow:
    rate = d["frame_error_rate"]
    return ResultRow(d["method"], d["budget"], int(d["seed"]), d["speaker_id"],
                     float("nan") if rate is None else float(rate), int(d["num_frames"]),
                     [int(e) for e in d.get("utterance_errors", [])], float(d.get("wallclock_ms", 0.0)),
                     d.get("status", "ok"))


def summary_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".summary.json")


def emit_report(rows: Sequence[ResultRow], path, fmt: str = "csv", counterparts: Optional[Dict[str, str]] = None,
                report_timing: bool = False) -> List[dict]:
    """Write rows to ``path`` and return the summary.

    ``csv`` writes the fixed column set to ``path`` and the summary next to
    it as ``<stem>.summary.json``. ``json`` writes one document holding the
    full rows and the summary. Wall-clock times are written as 0 unless
    ``report_timing`` is set, which keeps reruns byte-identical.
    """
    if not rows:
        raise ValueError("cannot emit an empty report")
    path = Path(path)
    summary = summarize(rows, counterparts)
    if fmt == "csv":
        path.write_text(rows_to_csv(rows, report_timing), encoding="utf-8")
        summary_path(path).write_text(json.dumps({"summary": summary}, indent=2) + "\n", encoding="utf-8")
    elif fmt == "json":
        doc = {"rows": [_row_to_dict(r, report_timing) for r in rows], "summary": summary}
        path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return summary


def parse_report(path) -> List[ResultRow]:
    """Read rows back from a report written by :func:`emit_report`.

    CSV carries no per-utterance errors or status, so those come back
    empty and ``"ok"``.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        return [_row_from_dict(d) for d in json.loads(text)["rows"]]
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != CSV_COLUMNS:
        raise ValueError(f"unexpected CSV header {header}")
    rows = []
    for method, budget, seed, speaker, rate, frames, wall in reader:
        rows.append(ResultRow(method, _budget_value(budget), int(seed), speaker, float(rate), int(frames),
                              [], float(wall)))
    return rows
