"""Experiment runners producing append-only metric records."""
from __future__ import annotations

import copy
import json
from pathlib import Path

import numpy as np

from . import baselines, wcst
from .checkpoint import model_arrays, restore, save_checkpoint
from .config import ExperimentConfig, parse_ranges
from .core import MLP
from .stream import (LabeledDataset, OnlineTaskStream, StreamConfig, StreamMetrics,
                     classification_loss, load_dataset, split_dataset, synth_dataset)
from .trainer import OnlineLearner


class MetricWriter:
    """Appends ``{run, seed, task, step, metric, value}`` JSON lines to one file."""

    def __init__(self, path: Path, run: str, seed: int):
        self.path = Path(path)
        self.run = run
        self.seed = seed
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._f = open(self.path, "w")
        self.count = 0

    def write(self, metric: str, value, task: int = -1, step: int = -1) -> None:
        if isinstance(value, (bool, np.bool_)):
            value = int(value)
        rec = {"run": self.run, "seed": self.seed, "task": int(task), "step": int(step),
               "metric": metric, "value": None if value is None else float(value)}
        self._f.write(json.dumps(rec) + "\n")
        self.count += 1

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def run_name(cfg: ExperimentConfig) -> str:
    e = cfg.experiment
    if e.experiment == "pretrain":
        return f"pretrain-{cfg.baseline.optimizer}"
    model = e.model if e.model != "baseline" else f"baseline-{cfg.baseline.protocol}-{cfg.baseline.optimizer}"
    return f"{e.experiment}-{model}"


# -- WCST ---------------------------------------------------------------------------------


def run_wcst(cfg: ExperimentConfig, seed: int, out: MetricWriter) -> list[wcst.TaskRecord]:
    w = cfg.wcst
    a2c = wcst.A2CConfig(w.discount, w.value_coef, w.entropy_coef)

    def sink(rec: wcst.TaskRecord) -> None:
        out.write("rule", rec.rule, rec.task_index)
        out.write("updates_to_solve", rec.updates_to_solve if rec.solved else rec.episodes, rec.task_index)
        out.write("solved", rec.solved, rec.task_index)
        out.write("perseveration_errors", rec.perseveration_errors, rec.task_index)
        out.write("errors", rec.errors, rec.task_index)
        out.write("diverged", rec.diverged, rec.task_index)

    if cfg.experiment.model == "baseline":
        spec = baselines.BaselineSpec(cfg.baseline.protocol, cfg.baseline_optimizer(), tuple(w.hidden))
        return baselines.run_wcst_baseline(spec, seed, w.n_tasks, w.max_episodes_per_task, sink=sink)
    net = wcst.make_agent_net(seed, tuple(w.hidden), fast=True)
    learner = OnlineLearner(net, cfg.trainer_config(seed), wcst.wcst_loss)
    env = wcst.WCST(seed=[seed, 3], allow_same_task=w.allow_same_task)
    rng = np.random.default_rng([seed, 4])
    return wcst.run_agent(learner, env, rng, w.n_tasks, w.max_episodes_per_task, a2c, sink=sink)


def wcst_trend(records: list[list[wcst.TaskRecord]], early=(0, 10), late=(30, 60)) -> dict:
    """Mean updates-to-solve and perseveration errors over two task buckets, pooled over seeds."""
    def bucket(lo, hi, attr):
        vals = []
        for recs in records:
            for r in recs[lo:hi]:
                v = getattr(r, attr)
                vals.append(r.episodes if v is None else v)
        return float(np.mean(vals))
    return {
        "updates_early": bucket(*early, "updates_to_solve"),
        "updates_late": bucket(*late, "updates_to_solve"),
        "persev_early": bucket(*early, "perseveration_errors"),
        "persev_late": bucket(*late, "perseveration_errors"),
    }


# -- streams ------------------------------------------------------------------------------


def stream_data(cfg: ExperimentConfig) -> dict[str, LabeledDataset]:
    s = cfg.stream
    if s.dataset:
        ds = load_dataset(s.dataset)
    else:
        ds = synth_dataset(s.n_classes, s.per_class, s.feature_dim, s.data_seed)
    n = len(ds.classes)
    counts = (round(0.4 * n), round(0.3 * n), n - round(0.4 * n) - round(0.3 * n))
    return split_dataset(ds, counts, seed=s.data_seed)


def _stream(cfg: ExperimentConfig, data: LabeledDataset, lengths, n_tasks: int, seed) -> OnlineTaskStream:
    s = cfg.stream
    sc = StreamConfig(5, s.nb_perv, s.nb_kept, lengths, n_tasks, s.batch_size, seed)
    return OnlineTaskStream(data, sc)


def _summary_records(out: MetricWriter, prefix: str, m: StreamMetrics) -> dict:
    summ = m.summary()
    for i, acc in enumerate(m.task_acc):
        out.write(f"{prefix}/task_accuracy", acc, i)
    for key in ("task_accuracy", "perseveration_rate", "interference"):
        out.write(f"{prefix}/{key}", summ[key])
    return summ


def eval_smn_stream(learner: OnlineLearner, stream: OnlineTaskStream) -> StreamMetrics:
    """Fast-weight-only evaluation on a copy; ``learner`` is left untouched."""
    probe = copy.deepcopy(learner)
    probe.model.reset_fast()
    fcfg = probe.cfg.fast.for_eval()
    m = StreamMetrics()
    for t, b in enumerate(stream.batches(), 1):
        rec = probe.eval_step(b, t, fcfg)
        m.update(rec.info["predictions"], b)
    return m


def eval_baseline_stream(base: baselines.StreamBaseline, stream: OnlineTaskStream) -> StreamMetrics:
    probe = copy.deepcopy(base)
    probe.start_stream()
    return probe.run(stream.batches())


def run_stream(cfg: ExperimentConfig, seed: int, out: MetricWriter, checkpoint_dir: Path | None = None) -> dict:
    """Train on the training-class stream, keep the best validation snapshot, evaluate on test streams."""
    s = cfg.stream
    data = stream_data(cfg)
    fd = data["train"].feature_dim
    sizes = [fd] + list(s.hidden) + [5]
    val_stream = lambda: _stream(cfg, data["valid"], parse_ranges(s.val_lengths)[0], s.val_tasks, [seed, 11])  # noqa: E731
    train_lengths = parse_ranges(s.train_lengths)[0]
    results = {}

    if cfg.experiment.model == "sparse-metanet":
        net = MLP(sizes, seed=seed, fast=True, fast_last=s.fast_last)
        learner = OnlineLearner(net, cfg.trainer_config(seed), classification_loss)
        train = _stream(cfg, data["train"], train_lengths, s.train_tasks, [seed, 10])
        evaluate = lambda stream: eval_smn_stream(learner, stream)  # noqa: E731
        snap = lambda: {k: v.copy() for k, v in model_arrays(learner.model).items()}  # noqa: E731
        put = lambda arrays: restore(learner.model, arrays)  # noqa: E731
        step = learner.step
    else:
        spec = baselines.BaselineSpec(cfg.baseline.protocol, cfg.baseline_optimizer(), tuple(s.hidden))
        pretrained = None
        if spec.protocol in ("online_pretrained", "reset_pretrained"):
            pretrained, info = baselines.pretrain(sizes, data["train"], seed, spec.optimizer,
                                                  s.pretrain_epochs, s.patience, s.batch_size)
            out.write("pretrain/val_accuracy", info["val_accuracy"])
            out.write("pretrain/epochs", info["epochs"])
        base = baselines.StreamBaseline(spec, sizes, seed, pretrained)
        learner = base.learner
        train = _stream(cfg, data["train"], train_lengths, s.train_tasks, [seed, 10])
        evaluate = lambda stream: eval_baseline_stream(base, stream)  # noqa: E731
        snap = lambda: baselines.snapshot(base.model)  # noqa: E731
        put = lambda arrays: baselines.load_snapshot(base.model, arrays)  # noqa: E731
        step = learner.step
        # only the plain online learner has anything to carry over from a training stream
        n_train = s.train_tasks if spec.protocol == "online" else 0

    if cfg.experiment.model == "sparse-metanet":
        n_train = s.train_tasks
    best, best_score = snap(), -np.inf
    if n_train > 0 and s.val_every:
        # the untrained network is a candidate too, so a run that collapses early falls back to it
        best_score = evaluate(val_stream()).summary()["task_accuracy"]
        out.write("valid/initial_task_accuracy", best_score)
    if n_train > 0:
        train_m = StreamMetrics()
        t = 0
        for task_i in range(n_train):
            task = train.next_task()
            for _ in range(task.length):
                t += 1
                b = train.next_batch(True)
                rec = step(b, t)
                train_m.update(rec.info["predictions"], b)
            if s.val_every and ((task_i + 1) % s.val_every == 0 or task_i + 1 == n_train):
                vm = evaluate(val_stream())
                score = vm.summary()["task_accuracy"]
                out.write("valid/task_accuracy", score, task_i)
                if score > best_score:
                    best, best_score = snap(), score
        summ = train_m.summary()
        out.write("train/task_accuracy", summ["task_accuracy"])
        if s.val_every:
            put(best)
    if checkpoint_dir is not None and cfg.experiment.model == "sparse-metanet":
        save_checkpoint(Path(checkpoint_dir) / f"model_seed{seed}.smnet", learner.model, cfg.fast_config(),
                        {"sizes": sizes, "fast_last": s.fast_last})

    for lo, hi in parse_ranges(s.eval_lengths):
        stream = _stream(cfg, data["test"], (lo, hi), s.eval_tasks, [seed, 12, lo, hi])
        m = evaluate(stream)
        results[f"{lo}-{hi}"] = _summary_records(out, f"test/{lo}-{hi}", m)
    return results


def run_pretrain(cfg: ExperimentConfig, seed: int, out: MetricWriter) -> dict:
    s = cfg.stream
    data = stream_data(cfg)
    sizes = [data["train"].feature_dim] + list(s.hidden) + [5]
    _, info = baselines.pretrain(sizes, data["train"], seed, cfg.baseline_optimizer(),
                                 s.pretrain_epochs, s.patience, s.batch_size)
    for i, acc in enumerate(info["history"]):
        out.write("pretrain/val_accuracy", acc, step=i)
    out.write("pretrain/best_val_accuracy", info["val_accuracy"])
    out.write("pretrain/epochs", info["epochs"])
    return info
