"""Collect metric files of a finished run into CSV and a JSON summary."""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import numpy as np

FIELDS = ("run", "seed", "task", "step", "metric", "value")
WCST_BUCKETS = ((1, 10), (11, 30), (31, 60))
WCST_METRICS = ("updates_to_solve", "perseveration_errors")


def metric_files(run_dir: Path) -> list[Path]:
    return sorted(Path(run_dir).rglob("metrics.jsonl"))


def read_records(path: Path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def mean_std(values) -> dict:
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if v.size == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(v.mean()), "std": float(v.std()), "n": int(v.size)}


def summarize(records: list[dict]) -> dict:
    """Per-run summary: means and spreads across seeds of per-seed aggregates."""
    by_run: dict[str, list[dict]] = defaultdict(list)
    for r in records:
        by_run[r["run"]].append(r)
    out = {}
    for run, recs in sorted(by_run.items()):
        seeds = sorted({r["seed"] for r in recs})
        summary: dict = {"seeds": seeds}
        if any(r["metric"] in WCST_METRICS for r in recs):
            for metric in WCST_METRICS:
                for lo, hi in WCST_BUCKETS:
                    per_seed = []
                    for s in seeds:
                        vals = [r["value"] for r in recs if r["seed"] == s and r["metric"] == metric
                                and lo - 1 <= r["task"] <= hi - 1]
                        if vals:
                            per_seed.append(float(np.mean(vals)))
                    summary[f"{metric}/tasks {lo}-{hi}"] = mean_std(per_seed)
        # stream scalars: test/<lengths>/<metric> written with task = -1
        scalars = defaultdict(dict)
        for r in recs:
            if r["task"] == -1 and r["step"] == -1:
                scalars[r["metric"]][r["seed"]] = r["value"]
        for metric, per_seed in sorted(scalars.items()):
            summary[metric] = mean_std(per_seed.values())
        out[run] = summary
    return out


def export(run_dir, out_dir=None) -> tuple[Path, Path]:
    """Write ``metrics.csv`` (one row per record) and ``summary.json``; returns both paths."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory {run_dir} does not exist")
    files = metric_files(run_dir)
    if not files:
        raise FileNotFoundError(f"no metrics.jsonl under {run_dir}")
    out_dir = Path(out_dir) if out_dir else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    records = [r for p in files for r in read_records(p)]
    csv_path = out_dir / "metrics.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(FIELDS)
        for r in records:
            w.writerow([r[k] if r[k] is not None else "" for k in FIELDS])
    summary_path = out_dir / "summary.json"
    summary_path.write_text(json.dumps(summarize(records), indent=2, sort_keys=True) + "\n")
    return csv_path, summary_path


def format_table(summary: dict) -> str:
    lines = []
    for run, s in summary.items():
        lines.append(f"{run}  (seeds: {len(s['seeds'])})")
        for key, v in s.items():
            if key == "seeds" or not isinstance(v, dict):
                continue
            if v["mean"] is None:
                lines.append(f"  {key:<44} n/a")
            else:
                lines.append(f"  {key:<44} {v['mean']:10.4f} ± {v['std']:.4f}")
    return "\n".join(lines)
