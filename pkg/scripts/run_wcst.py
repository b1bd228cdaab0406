"""WCST sweep: the fast-weight agent next to the online-Adam baseline, several seeds.

    python scripts/run_wcst.py --seeds 5 --out runs/wcst_sweep

Writes one metric file per model and seed, then prints the per-bucket table
(tasks 1-10, 11-30, 31-60) of updates-to-solve and perseveration errors.
"""
from __future__ import annotations

import argparse
import sys

from sparse_metanet.cli import main as smnet


def parse() -> argparse.Namespace:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--tasks", type=int, default=60)
    ap.add_argument("--max-episodes", type=int, default=600, help="cap on episodes per task")
    ap.add_argument("--out", default="runs/wcst_sweep")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--skip-baseline", action="store_true")
    return ap.parse_args()


def main() -> int:
    a = parse()
    common = ["--seeds", str(a.seeds), "--jobs", str(a.jobs),
              "--set", f"wcst.n_tasks={a.tasks}", "--set", f"wcst.max_episodes_per_task={a.max_episodes}"]
    status = smnet(["run", "wcst", "--model", "sparse-metanet", "--out", f"{a.out}/sparse-metanet", *common])
    if status == 0 and not a.skip_baseline:
        status = smnet(["run", "wcst", "--model", "baseline", "--set", "baseline.protocol=online",
                        "--out", f"{a.out}/baseline-online-adam", *common])
    if status == 0:
        status = smnet(["export", a.out])
    return status


if __name__ == "__main__":
    sys.exit(main())
