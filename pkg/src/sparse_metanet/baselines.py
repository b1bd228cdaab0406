"""Gradient-only baselines: plain networks with the fast branch switched off.

Protocols
---------
``offline_reset``      fresh network and optimizer at every task boundary (needs the boundary oracle)
``online``             one network, never reset; the optimizer is reset once at the start of an evaluation stream
``online_pretrained``  ``online`` starting from pretrained weights
``reset_pretrained``   pretrained weights and a fresh optimizer at every task boundary
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, softmax_cross_entropy
from .core import MLP
from .optim import Optimizer, OptimizerSpec
from .stream import Batch, LabeledDataset, OnlineTaskStream, StreamConfig, StreamMetrics, classification_loss
from .trainer import PlainLearner
from . import wcst

PROTOCOLS = ("offline_reset", "online", "online_pretrained", "reset_pretrained")
LR_GRID = (0.0001, 0.0003, 0.0005, 0.001, 0.003)


@dataclass
class BaselineSpec:
    protocol: str = "online"
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    hidden: tuple[int, ...] = (256, 256)

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}; expected one of {PROTOCOLS}")
        self.hidden = tuple(self.hidden)


def grid(protocol: str, kinds=("adam", "rmsprop"), lrs=LR_GRID, hidden=(256, 256)) -> list[BaselineSpec]:
    return [BaselineSpec(protocol, OptimizerSpec(k, lr), hidden) for k in kinds for lr in lrs]


# -- WCST ---------------------------------------------------------------------------


def run_wcst_baseline(spec: BaselineSpec, seed: int, n_tasks: int,
                      max_episodes_per_task: int = 1000, sink=None) -> list[wcst.TaskRecord]:
    if spec.protocol not in ("offline_reset", "online"):
        raise ValueError(f"protocol {spec.protocol!r} has no WCST variant")
    net = wcst.make_agent_net(seed, spec.hidden, fast=False)
    learner = PlainLearner(net, 1, spec.optimizer, wcst.wcst_loss)
    env = wcst.WCST(seed=[seed, 3])
    rng = np.random.default_rng([seed, 4])

    def on_task_start(i: int) -> None:
        if spec.protocol == "offline_reset" and i > 0:
            learner.model = wcst.make_agent_net(seed + 7919 * i, spec.hidden, fast=False)
            learner.opt = Optimizer(spec.optimizer, learner.model.slow_params())
            learner.tape.truncate()

    return wcst.run_agent(learner, env, rng, n_tasks, max_episodes_per_task,
                          on_task_start=on_task_start, sink=sink)


# -- streams ------------------------------------------------------------------------


def snapshot(model) -> list[np.ndarray]:
    return [p.value.copy() for p in model.slow_params().values()]


def load_snapshot(model, snap: list[np.ndarray]) -> None:
    for p, v in zip(model.slow_params().values(), snap):
        p.value[...] = v


def pretrain(sizes: list[int], data: LabeledDataset, seed: int, opt: OptimizerSpec,
             max_epochs: int = 100, patience: int = 5, batch_size: int = 32,
             holdout: float = 0.1) -> tuple[MLP, dict]:
    """Supervised pretraining on all classes of ``data`` with a global-label head.

    Stops when held-out accuracy has not improved for ``patience`` epochs.
    Returns a 5-way (``sizes[-1]``) network whose trunk is the best pretrained
    trunk and whose head is freshly initialized from ``seed``.
    """
    rng = np.random.default_rng([seed, 5])
    labels = data.labels
    xs, ys, vx, vy = [], [], [], []
    for j, lbl in enumerate(labels):
        x = data.classes[lbl][rng.permutation(len(data.classes[lbl]))]
        n_val = max(1, int(round(holdout * len(x))))
        vx.append(x[:n_val]); vy.append(np.full(n_val, j))
        xs.append(x[n_val:]); ys.append(np.full(len(x) - n_val, j))
    X, Y = np.concatenate(xs), np.concatenate(ys)
    VX, VY = np.concatenate(vx), np.concatenate(vy)
    full = MLP(list(sizes[:-1]) + [len(labels)], seed=seed, fast=False)
    optim = Optimizer(opt, full.slow_params())
    tape = Tape()
    best, best_acc, stale, history = snapshot(full), -1.0, 0, []
    for epoch in range(max_epochs):
        order = rng.permutation(len(Y))
        for s in range(0, len(Y), batch_size):
            idx = order[s:s + batch_size]
            loss = softmax_cross_entropy(tape, full.forward(tape, X[idx]), Y[idx])
            optim.step(tape.backward(loss))
            tape.truncate()
        acc = float((full.forward(tape, VX).value.argmax(1) == VY).mean())
        tape.truncate()
        history.append(acc)
        if acc > best_acc:
            best, best_acc, stale = snapshot(full), acc, 0
        else:
            stale += 1
            if stale >= patience:
                break
    load_snapshot(full, best)
    net = MLP(list(sizes), seed=seed, fast=False)
    for dst, src in zip(net.layers[:-1], full.layers[:-1]):
        dst.W.value[...] = src.W.value
        dst.b.value[...] = src.b.value
    return net, {"epochs": len(history), "val_accuracy": best_acc, "history": history}


class StreamBaseline:
    """Online gradient learner over task streams under one protocol."""

    def __init__(self, spec: BaselineSpec, sizes: list[int], seed: int, pretrained: MLP | None = None):
        if spec.protocol in ("online_pretrained", "reset_pretrained") and pretrained is None:
            raise ValueError(f"protocol {spec.protocol} needs a pretrained network")
        self.spec = spec
        self.sizes = list(sizes)
        self.seed = seed
        net = copy.deepcopy(pretrained) if pretrained is not None else MLP(self.sizes, seed=seed, fast=False)
        self.initial = snapshot(net)
        self.learner = PlainLearner(net, 1, spec.optimizer, classification_loss)
        self._resets = 0

    @property
    def model(self):
        return self.learner.model

    def start_stream(self) -> None:
        self.learner.opt.reset()
        self.learner.tape.truncate()

    def start_task(self) -> None:
        p = self.spec.protocol
        if p == "reset_pretrained":
            load_snapshot(self.model, self.initial)
            self.learner.opt.reset()
        elif p == "offline_reset":
            self._resets += 1
            fresh = MLP(self.sizes, seed=self.seed + 7919 * self._resets, fast=False)
            load_snapshot(self.model, snapshot(fresh))
            self.learner.opt.reset()

    def run(self, batches, metrics: StreamMetrics | None = None, learn: bool = True) -> StreamMetrics:
        metrics = metrics or StreamMetrics()
        task = None
        for t, b in enumerate(batches, 1):
            if b.task_index != task:
                if task is not None:
                    self.start_task()
                task = b.task_index
            rec = self.learner.step(b, t, learn=learn)
            metrics.update(rec.info["predictions"], b)
        return metrics


def run_baseline(spec: BaselineSpec, benchmark: str, seed: int, **kw):
    """Dispatch to the WCST or stream runner; returns the benchmark's metric records."""
    if benchmark == "wcst":
        return run_wcst_baseline(spec, seed, **kw)
    if benchmark == "stream":
        stream: OnlineTaskStream = kw.pop("stream")
        base = StreamBaseline(spec, kw.pop("sizes"), seed, kw.pop("pretrained", None))
        base.start_stream()
        return base.run(stream.batches()).summary()
    raise ValueError(f"unknown benchmark {benchmark!r}")
