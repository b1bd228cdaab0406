"""Online task-stream sweep on the synthetic clustered dataset.

    python scripts/run_stream.py --seeds 5 --out runs/stream_sweep

Trains the fast-weight classifier on the training-class stream, then
evaluates with fast weights only on four test streams of increasing task
length.  The online fine-tuning baseline sees the same training stream.
Pass ``--protocols`` to add the reset and pretrained baselines.
"""
from __future__ import annotations

import argparse
import sys

from sparse_metanet.cli import main as smnet


def parse() -> argparse.Namespace:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--train-tasks", type=int, default=300)
    ap.add_argument("--eval-tasks", type=int, default=100)
    ap.add_argument("--out", default="runs/stream_sweep")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--protocols", nargs="*", default=["online"],
                    choices=["online", "offline_reset", "online_pretrained", "reset_pretrained"])
    return ap.parse_args()


def main() -> int:
    a = parse()
    common = ["--seeds", str(a.seeds), "--jobs", str(a.jobs),
              "--set", f"stream.train_tasks={a.train_tasks}", "--set", f"stream.eval_tasks={a.eval_tasks}"]
    status = smnet(["run", "stream", "--model", "sparse-metanet", "--out", f"{a.out}/sparse-metanet", *common])
    for proto in a.protocols:
        if status:
            break
        status = smnet(["run", "stream", "--model", "baseline", "--set", f"baseline.protocol={proto}",
                        "--out", f"{a.out}/baseline-{proto}-adam", *common])
    if status == 0:
        status = smnet(["export", a.out])
    return status


if __name__ == "__main__":
    sys.exit(main())
