"""``smnet`` command line: run experiments, export metrics, self-checks, data and checkpoint tools.

Exit codes: 0 success, 1 configuration error, 2 runtime failure, 3 failed check.
The output root defaults to ``./runs`` and can be moved with ``SMNET_OUTPUT_ROOT``.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import checks, experiments
from .checkpoint import CheckpointError, load_arrays
from .config import ConfigError, ExperimentConfig, PRESETS, from_ini, override, preset, to_ini
from .export import export, format_table, summarize
from .stream import StreamError, synth_dataset, write_dataset

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3
OUTPUT_ENV = "SMNET_OUTPUT_ROOT"


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def build_config(args) -> ExperimentConfig:
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        cfg = from_ini(path.read_text(), preset(args.preset) if args.preset else None)
    elif args.preset:
        cfg = preset(args.preset)
    else:
        cfg = preset("online-stream" if args.experiment in ("stream", "pretrain") else "wcst")
    cfg.experiment.experiment = args.experiment
    if args.model:
        cfg.experiment.model = args.model
    if args.seeds is not None:
        if args.seeds < 1:
            raise ConfigError("--seeds must be at least 1")
        cfg.experiment.seeds = list(range(args.seed_start, args.seed_start + args.seeds))
    cfg = override(cfg, args.set or [])
    if args.out:
        cfg.experiment.output = args.out
    return cfg.validate()


def run_dir_for(cfg: ExperimentConfig) -> Path:
    if cfg.experiment.output:
        return Path(cfg.experiment.output)
    return output_root() / experiments.run_name(cfg)


def _run_seed(cfg: ExperimentConfig, seed: int, run_dir: Path, checkpoints: bool) -> None:
    seed_dir = run_dir / f"seed{seed}"
    with experiments.MetricWriter(seed_dir / "metrics.jsonl", experiments.run_name(cfg), seed) as out:
        kind = cfg.experiment.experiment
        if kind == "wcst":
            experiments.run_wcst(cfg, seed, out)
        elif kind == "stream":
            experiments.run_stream(cfg, seed, out, seed_dir if checkpoints else None)
        elif kind == "pretrain":
            experiments.run_pretrain(cfg, seed, out)


def cmd_run(args) -> int:
    if args.experiment == "check":
        return cmd_check(argparse.Namespace(suite=args.target or "all"))
    cfg = build_config(args)
    run_dir = run_dir_for(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(to_ini(cfg))
    seeds = cfg.experiment.seeds
    if args.jobs > 1 and len(seeds) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(args.jobs) as pool:
            for f in [pool.submit(_run_seed, cfg, s, run_dir, args.checkpoint) for s in seeds]:
                f.result()
    else:
        for s in seeds:
            print(f"[{experiments.run_name(cfg)}] seed {s}", file=sys.stderr, flush=True)
            _run_seed(cfg, s, run_dir, args.checkpoint)
    records = [r for p in sorted(run_dir.glob("seed*/metrics.jsonl")) for r in _read(p)]
    print(format_table(summarize(records)))
    print(f"metrics written under {run_dir}")
    return EXIT_OK


def _read(path: Path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def cmd_export(args) -> int:
    try:
        csv_path, summary_path = export(args.run_dir, args.out)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(csv_path)
    print(summary_path)
    return EXIT_OK


def cmd_check(args) -> int:
    try:
        outcomes = checks.run_checks(args.suite)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for o in outcomes:
        print(f"{'PASS' if o.passed else 'FAIL'}  {o.name:<16} {o.detail}")
    return EXIT_OK if all(o.passed for o in outcomes) else EXIT_CHECK


def cmd_gen_data(args) -> int:
    if args.classes < 1 or args.per_class < 1 or args.dim < 1:
        print("error: --classes, --per-class and --dim must be positive", file=sys.stderr)
        return EXIT_CONFIG
    ds = synth_dataset(args.classes, args.per_class, args.dim, seed=args.seed)
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(path, ds)
    print(f"wrote {args.classes} classes x {args.per_class} examples, dim {args.dim}, to {path}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    try:
        arrays, config, arch = load_arrays(args.checkpoint)
    except (OSError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"architecture: {json.dumps(arch, sort_keys=True)}")
    print(f"fast-weight config: {json.dumps(config, sort_keys=True)}")
    for key, a in arrays.items():
        nz = np.count_nonzero(a) / max(a.size, 1)
        print(f"  {key:<14} {str(a.shape):<12} mean {a.mean():+.3e}  std {a.std():.3e}  nonzero {nz:.2f}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # bad flags are configuration errors, not runtime failures
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def make_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="smnet", description="Sparse fast-weight meta networks: experiments and tools.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run an experiment for one or more seeds")
    run.add_argument("experiment", choices=("wcst", "stream", "pretrain", "check"))
    run.add_argument("target", nargs="?", help="check suite for `run check` (gradients, invariants, all)")
    run.add_argument("--model", choices=("sparse-metanet", "baseline"))
    run.add_argument("--seeds", type=int, help="number of seeds, numbered from --seed-start")
    run.add_argument("--seed-start", type=int, default=0)
    run.add_argument("--config", help="INI config file")
    run.add_argument("--preset", choices=PRESETS)
    run.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
    run.add_argument("--out", help="run directory (default $%s/<run name>)" % OUTPUT_ENV)
    run.add_argument("--jobs", type=int, default=1, help="seeds to run in parallel")
    run.add_argument("--checkpoint", action="store_true", help="save trained stream models")
    run.set_defaults(func=cmd_run)

    ex = sub.add_parser("export", help="write metrics.csv and summary.json for a run directory")
    ex.add_argument("run_dir")
    ex.add_argument("--out", help="directory for the exported files (default: the run directory)")
    ex.set_defaults(func=cmd_export)

    ck = sub.add_parser("check", help="gradient and invariant self-checks")
    ck.add_argument("suite", nargs="?", default="all", choices=("gradients", "invariants", "all"))
    ck.set_defaults(func=cmd_check)

    gd = sub.add_parser("gen-data", help="write a synthetic clustered dataset")
    gd.add_argument("--out", required=True)
    gd.add_argument("--classes", type=int, default=100)
    gd.add_argument("--per-class", type=int, default=512)
    gd.add_argument("--dim", type=int, default=32)
    gd.add_argument("--seed", type=int, default=1234)
    gd.set_defaults(func=cmd_gen_data)

    ins = sub.add_parser("inspect", help="summarize a checkpoint file")
    ins.add_argument("checkpoint")
    ins.set_defaults(func=cmd_inspect)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, StreamError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception:  # noqa: BLE001  report and map to the runtime exit code
        traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
