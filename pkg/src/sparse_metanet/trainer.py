"""Online loop alternating fast-weight updates with truncated-BPTT gradient steps."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator

import numpy as np

from .autodiff import NumericError, Tape, Tensor
from .core import (
    FastWeightConfig,
    FastWeightNet,
    accumulate_fast_weights,
    generate_sparse_fast_weights,
    sample_mask,
    update_gradient_average,
)
from .optim import Optimizer, OptimizerSpec

FAST = "fast"
GRADIENT = "gradient"

# loss_fn(tape, model, batch) -> (scalar loss tensor, info dict)
LossFn = Callable[[Tape, FastWeightNet, Any], "tuple[Tensor, dict]"]


@dataclass
class TrainerConfig:
    k: int = 3
    fast: FastWeightConfig = field(default_factory=FastWeightConfig)
    slow_optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    meta_optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    seed: int = 0
    eval_fast_only: bool = False
    allow_k1: bool = False

    def __post_init__(self):
        if self.k < 1 or (self.k == 1 and not self.allow_k1):
            raise ValueError("k must be >= 2 (k = 1 only as an explicit baseline mode)")


@dataclass
class StepRecord:
    t: int
    loss: float
    correct: int
    total: int
    update_kind: str
    wall_time: float
    diverged: bool = False
    info: dict = field(default_factory=dict, repr=False)


class OnlineLearner:
    """Runs the online fast/gradient step schedule on one model.

    Mask sampling uses its own RNG stream (``[seed, 2]``) so runs with
    ``p = 0`` draw nothing from it and consume no other stream either.
    """

    def __init__(self, model: FastWeightNet, cfg: TrainerConfig, loss_fn: LossFn):
        self.model = model
        self.cfg = cfg
        self.loss_fn = loss_fn
        self.tape = Tape()
        self.slow_opt = Optimizer(cfg.slow_optimizer, model.slow_params())
        self.meta_opt = Optimizer(cfg.meta_optimizer, model.meta_params())
        self.mask_rng = np.random.default_rng([cfg.seed, 2])
        self.diverged = False
        self.n_gradient = 0
        self.n_fast = 0
        self.window_peaks: list[int] = []
        self._window_peak = 0

    def reset_optimizers(self) -> None:
        self.slow_opt.reset()
        self.meta_opt.reset()

    def _track_window(self) -> None:
        self._window_peak = max(self._window_peak, len(self.tape))

    def _close_window(self) -> None:
        self._track_window()
        self.window_peaks.append(self._window_peak)
        self._window_peak = 0
        self.tape.truncate()

    def _fast_update(self, grads, fcfg: FastWeightConfig, p: float, record: bool) -> None:
        tape = self.tape if record else None
        for layer, ml in zip(self.model.layers, self.model.metas):
            if ml is None:
                continue
            mask = sample_mask(self.mask_rng, layer.shape, p)
            gW = grads.get(layer.W)
            if gW is None:
                gW = np.zeros(layer.shape)
            M_sparse = generate_sparse_fast_weights(tape, layer, gW, mask, fcfg, ml)
            layer.M = accumulate_fast_weights(tape, layer.M, M_sparse, mask)

    def _update_average(self, grads, fcfg: FastWeightConfig) -> None:
        for layer in self.model.layers:
            if not layer.fast:
                continue
            gW = grads.get(layer.W)
            if gW is None:
                gW = np.zeros(layer.shape)
            layer.I = update_gradient_average(layer.I, gW, fcfg.gamma, fcfg.beta1)

    def _carry(self) -> None:
        if self.cfg.fast.carry_mode == "reset":
            for layer in self.model.layers:
                layer.M = Tensor(np.zeros(layer.shape))
        else:
            for layer in self.model.layers:
                layer.detach_fast()

    def step(self, batch, t: int) -> StepRecord:
        """One training iteration at step index ``t`` (1-based)."""
        start = time.perf_counter()
        loss, info = self.loss_fn(self.tape, self.model, batch)
        self._track_window()
        lv = float(loss.value)
        diverged_now = not np.isfinite(lv)
        gradient_step = t % self.cfg.k == 0
        grads = {}
        if not diverged_now and loss.tape is self.tape:
            # fast steps only need dL/dW; skip the meta-learner history
            wrt = None if gradient_step else [layer.W for layer in self.model.layers]
            grads = self.tape.backward(loss, wrt)
        fcfg = self.cfg.fast
        self._update_average(grads, fcfg)
        if gradient_step:
            kind = GRADIENT
            if not diverged_now:
                try:
                    self.slow_opt.step(grads)
                    self.meta_opt.step(grads)
                except NumericError:
                    diverged_now = True
            self.n_gradient += 1
            self._close_window()
            self._carry()
        else:
            kind = FAST
            if not diverged_now:
                try:
                    self._fast_update(grads, fcfg, fcfg.p_train, record=True)
                    self._track_window()
                except NumericError:
                    diverged_now = True
            self.n_fast += 1
        if diverged_now:
            self.diverged = True
        return StepRecord(t, lv, info.get("correct", 0), info.get("total", 0), kind,
                          time.perf_counter() - start, diverged_now, info)

    def eval_step(self, batch, t: int, fcfg: FastWeightConfig | None = None) -> StepRecord:
        """Fast-weight-only step: slow and meta weights are never modified."""
        start = time.perf_counter()
        fcfg = fcfg or self.cfg.fast.for_eval()
        loss, info = self.loss_fn(self.tape, self.model, batch)
        lv = float(loss.value)
        diverged_now = not np.isfinite(lv)
        grads = {}
        if not diverged_now and loss.tape is self.tape:
            grads = self.tape.backward(loss, [layer.W for layer in self.model.layers])
        self.tape.truncate()
        if not diverged_now:
            self._update_average(grads, fcfg)
            try:
                self._fast_update(grads, fcfg, fcfg.p_train, record=False)
            except NumericError:
                diverged_now = True
        self.n_fast += 1
        return StepRecord(t, lv, info.get("correct", 0), info.get("total", 0), FAST,
                          time.perf_counter() - start, diverged_now, info)


def online_step(learner: OnlineLearner, batch, t: int) -> StepRecord:
    return learner.step(batch, t)


def evaluate_stream(learner: OnlineLearner, batches: Iterable, start_t: int = 1) -> Iterator[StepRecord]:
    """Fast-weight-only pass over ``batches`` with the evaluation mask probability."""
    fcfg = learner.cfg.fast.for_eval()
    for t, batch in enumerate(batches, start=start_t):
        yield learner.eval_step(batch, t, fcfg)


class PlainLearner:
    """Truncated-BPTT gradient descent on a network with fast weights disabled.

    Gradient steps happen at ``k | t`` using that step's loss, exactly like
    :class:`OnlineLearner` with ``p = 0``.  ``k = 1`` is ordinary online SGD.
    """

    def __init__(self, model: FastWeightNet, k: int, opt: OptimizerSpec, loss_fn: LossFn):
        self.model = model
        self.k = k
        self.loss_fn = loss_fn
        self.tape = Tape()
        self.opt = Optimizer(opt, model.slow_params())
        self.diverged = False

    def step(self, batch, t: int, learn: bool = True) -> StepRecord:
        start = time.perf_counter()
        loss, info = self.loss_fn(self.tape, self.model, batch)
        lv = float(loss.value)
        diverged_now = not np.isfinite(lv)
        kind = FAST
        if learn and t % self.k == 0:
            kind = GRADIENT
            if not diverged_now:
                grads = self.tape.backward(loss)
                try:
                    self.opt.step(grads)
                except NumericError:
                    diverged_now = True
        if t % self.k == 0 or not learn:
            self.tape.truncate()
        self.diverged |= diverged_now
        return StepRecord(t, lv, info.get("correct", 0), info.get("total", 0), kind,
                          time.perf_counter() - start, diverged_now, info)
