"""Quick self-checks behind ``smnet check``: gradients plus structural invariants."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import gradcheck, wcst
from .core import (FastWeightConfig, MLP, accumulate_fast_weights,
                   generate_sparse_fast_weights, meta_forward, preprocess_gradient, sample_mask)
from .optim import OptimizerSpec
from .stream import OnlineTaskStream, StreamConfig, check_task_pair, classification_loss, synth_dataset
from .trainer import GRADIENT, OnlineLearner, TrainerConfig


@dataclass
class Outcome:
    name: str
    passed: bool
    detail: str


def check_gradients(n_seeds: int = 100) -> Outcome:
    start = time.perf_counter()
    res = gradcheck.run_gradient_suite(n_seeds)
    worst = max(r.max_rel_error for r in res)
    kinks = sum(r.n_kinks for r in res)
    return Outcome("gradients", worst <= 1e-5,
                   f"{n_seeds} seeds, max rel err {worst:.2e}, {kinks} kink-skipped coords, "
                   f"{time.perf_counter() - start:.1f}s")


def check_accumulate(n_steps: int = 2000, seed: int = 0) -> Outcome:
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(7, 9))
    for _ in range(n_steps):
        mask = sample_mask(rng, M.shape, rng.uniform())
        fresh = rng.normal(size=M.shape) * mask.bits
        new = accumulate_fast_weights(None, M, fresh, mask).value
        if not (np.array_equal(new[~mask.bits], M[~mask.bits]) and np.array_equal(new[mask.bits], fresh[mask.bits])):
            return Outcome("accumulate", False, "masked select violated")
        M = new
    return Outcome("accumulate", True, f"{n_steps} steps exact")


def check_mask_rate(n: int = 100_000, seed: int = 0) -> Outcome:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in (0.05, 0.3, 0.5):
        z = abs(sample_mask(rng, (n,), p).nnz - n * p) / np.sqrt(n * p * (1 - p))
        worst = max(worst, z)
    return Outcome("mask-rate", bool(worst <= 3.0), f"max |z| = {worst:.2f}")


def check_coordinatewise(seed: int = 0) -> Outcome:
    rng = np.random.default_rng(seed)
    net = MLP([6, 5], seed=seed)
    layer, ml = net.layers[0], net.metas[0]
    layer.I = rng.normal(size=layer.shape)
    g = rng.normal(size=layer.shape) * 10.0 ** rng.integers(-8, 1, size=layer.shape)
    mask = sample_mask(rng, layer.shape, 0.5)
    cfg = FastWeightConfig()
    vec = generate_sparse_fast_weights(None, layer, g, mask, cfg, ml).value
    loop = np.zeros(layer.shape)
    for i in range(layer.shape[0]):
        for j in range(layer.shape[1]):
            if mask.bits[i, j]:
                f = preprocess_gradient(layer.I[i, j] + cfg.beta2 * g[i, j])
                loop[i, j] = meta_forward(ml, f)
    diff = float(np.abs(vec - loop).max())
    return Outcome("coordinatewise", diff <= 1e-12, f"max abs diff {diff:.1e}")


def check_schedule(T: int = 600, k: int = 3, seed: int = 0) -> Outcome:
    ds = synth_dataset(10, 40, 8, seed=seed)
    stream = OnlineTaskStream(ds, StreamConfig(nb_classes=5, total_tasks=10_000, batch_size=4, seed=seed))
    cfg = TrainerConfig(k=k, fast=FastWeightConfig(), slow_optimizer=OptimizerSpec(lr=1e-3),
                        meta_optimizer=OptimizerSpec(lr=1e-3), seed=seed)
    learner = OnlineLearner(MLP([8, 16, 5], seed=seed), cfg, classification_loss)
    batches = stream.batches()
    steps = [learner.step(next(batches), t).update_kind == GRADIENT for t in range(1, T + 1)]
    where = [t for t, g in enumerate(steps, 1) if g]
    ok = where == list(range(k, T + 1, k))
    before = [p.value.copy() for p in {**learner.model.slow_params(), **learner.model.meta_params()}.values()]
    for t in range(1, 200):
        learner.eval_step(next(batches), t)
    after = [p.value for p in {**learner.model.slow_params(), **learner.model.meta_params()}.values()]
    frozen = all(np.array_equal(a, b) for a, b in zip(before, after))
    return Outcome("schedule", ok and frozen,
                   f"{len(where)} gradient steps over {T}, eval leaves weights unchanged: {frozen}")


def check_wcst(n_cards: int = 2000, seed: int = 0) -> Outcome:
    env = wcst.WCST(seed=seed)
    rng = np.random.default_rng(seed)
    for _ in range(n_cards):
        old = env.current_rule
        enc, target, prev = env.next_card()
        card = env.pending
        if target != card.code_indices[env.current_rule] or wcst.decode_card(enc) != list(card.code_indices):
            return Outcome("wcst", False, "card/target mismatch")
        a = int(rng.integers(4))
        _, _, persev = env.step(a)
        if persev != (prev is not None and a == prev and a != target):
            return Outcome("wcst", False, "perseveration flag mismatch")
        if rng.random() < 0.05:
            env.next_task()
            if env.current_rule == old:
                return Outcome("wcst", False, "rule repeated after switch")
    return Outcome("wcst", True, f"{n_cards} cards consistent")


def check_stream(n_tasks: int = 400, seed: int = 0) -> Outcome:
    ds = synth_dataset(30, 4, 4, seed=seed)
    stream = OnlineTaskStream(ds, StreamConfig(total_tasks=n_tasks, seed=seed))
    tasks = stream.tasks(n_tasks)
    bad = sum(bool(check_task_pair(a, b)) for a, b in zip(tasks[:-1], tasks[1:]))
    again = OnlineTaskStream(ds, StreamConfig(total_tasks=n_tasks, seed=seed)).tasks(n_tasks)
    same = [t.to_json() for t in tasks] == [t.to_json() for t in again]
    return Outcome("stream", bad == 0 and same, f"{bad} bad pairs of {n_tasks - 1}, deterministic: {same}")


INVARIANTS = (check_accumulate, check_mask_rate, check_coordinatewise, check_schedule, check_wcst, check_stream)


def run_checks(which: str = "all") -> list[Outcome]:
    out = []
    if which in ("gradients", "all"):
        out.append(check_gradients())
    if which in ("invariants", "all"):
        out.extend(fn() for fn in INVARIANTS)
    if not out:
        raise ValueError(f"unknown check suite {which!r}; expected gradients, invariants or all")
    return out
