"""Central finite-difference check of one truncated training window.

The analytic side is what the trainer uses: fast steps inside the window feed
the meta-learner a detached gradient signal, so the checked function holds
those meta-learner inputs and the masks fixed at their unperturbed values.
Everything else (slow weights, biases, meta weights, and the paths through
the generated fast weights into the final loss) is differentiated.

The finite differences come from a separate plain-numpy replay evaluated for
all perturbations at once.  Perturbations that flip the on/off pattern of any
rectifier are re-tried with a smaller step and skipped if the flip persists;
the count is reported.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import LEAKY_SLOPE, Tape, Tensor, softmax_cross_entropy
from .core import (FastWeightConfig, MLP, SparseMask, preprocess_gradient, sample_mask,
                   update_gradient_average)


@dataclass
class WindowCase:
    model: MLP
    xs: list[np.ndarray]
    ys: list[np.ndarray]
    masks: list[list[SparseMask]]
    M0: list[np.ndarray]
    I0: list[np.ndarray]
    cfg: FastWeightConfig
    frozen: list[list[np.ndarray]] = field(default_factory=list)


def make_case(seed: int, sizes=(3, 4, 3), k: int = 3, batch: int = 2, p: float = 0.5) -> WindowCase:
    rng = np.random.default_rng([seed, 77])
    model = MLP(list(sizes), seed=seed, activation="relu")
    # nonzero biases and meta weights so every term is exercised
    for prm in list(model.slow_params().values()) + list(model.meta_params().values()):
        prm.value[...] = prm.value + rng.normal(0, 0.1, prm.value.shape)
    cfg = FastWeightConfig(gamma=0.9, beta1=0.5, beta2=0.5, p_train=p)
    M0 = [rng.normal(0, 0.05, L.shape) for L in model.layers]
    I0 = [rng.normal(0, 0.05, L.shape) for L in model.layers]
    xs = [rng.normal(size=(batch, sizes[0])) for _ in range(k)]
    ys = [rng.integers(0, sizes[-1], size=batch) for _ in range(k)]
    masks = [[sample_mask(rng, L.shape, p) for L in model.layers] for _ in range(k - 1)]
    return WindowCase(model, xs, ys, masks, M0, I0, cfg)


def window_loss(case: WindowCase, tape: Tape, record: bool) -> Tensor:
    """Replay the window on ``tape`` and return the final step's loss.

    With ``record`` the meta-learner inputs are computed from live gradients
    and stored on ``case.frozen``; otherwise the stored inputs are reused.
    """
    model = case.model
    for L, M, I in zip(model.layers, case.M0, case.I0):
        L.M, L.I = Tensor(M.copy()), I.copy()
    if record:
        case.frozen = []
    for s, masks in enumerate(case.masks):
        loss = softmax_cross_entropy(tape, model.forward(tape, case.xs[s]), case.ys[s])
        if record:
            grads = tape.backward(loss, [L.W for L in model.layers])
            step_inputs = []
            for L in model.layers:
                g = grads.get(L.W, np.zeros(L.shape))
                step_inputs.append(L.I + case.cfg.beta2 * g)
                L.I = update_gradient_average(L.I, g, case.cfg.gamma, case.cfg.beta1)
            case.frozen.append(step_inputs)
        for L, ml, mask, combined in zip(model.layers, model.metas, masks, case.frozen[s]):
            idx = np.flatnonzero(mask.bits)
            if idx.size == 0:
                continue
            feats = preprocess_gradient(combined.reshape(-1)[idx])
            M_sparse = tape.scatter(ml.forward(tape, feats), idx, L.shape)
            L.M = tape.where(mask.bits, M_sparse, L.M)
    return softmax_cross_entropy(tape, model.forward(tape, case.xs[-1]), case.ys[-1])


@dataclass
class CheckResult:
    max_rel_error: float
    per_param: dict[str, float]
    n_checked: int
    n_kinks: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= 1e-5


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """``|a - b| / max(|a|, |b|, floor)`` on whole arrays.

    The floor keeps gradients that are zero up to rounding from reporting a
    relative error of order one.
    """
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def _relu(x):
    return np.maximum(x, 0.0)


def _leaky(x):
    return np.maximum(x, LEAKY_SLOPE * x)


def replay_batched(case: WindowCase, vals: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Plain-numpy replay of the frozen window for ``P`` parameter sets at once.

    ``vals[name]`` has shape ``(P, *param.shape)``.  Returns the final losses
    ``(P,)`` and the rectifier on/off pattern ``(P, n)`` of everything that
    feeds the final loss.
    """
    model = case.model
    P = next(iter(vals.values())).shape[0]
    Ms = [np.broadcast_to(M0, (P,) + M0.shape).copy() for M0 in case.M0]
    pattern = []
    for masks, frozen in zip(case.masks, case.frozen):
        for i, (L, mask, combined) in enumerate(zip(model.layers, masks, frozen)):
            idx = np.flatnonzero(mask.bits)
            if model.metas[i] is None or idx.size == 0:
                continue
            f = preprocess_gradient(combined.reshape(-1)[idx])
            h = np.einsum("nf,phf->pnh", f, vals[f"meta{i}.W1"]) + vals[f"meta{i}.b1"][:, None, :]
            pattern.append(h.reshape(P, -1) > 0)
            h = _leaky(h)
            h = np.einsum("pnh,pgh->png", h, vals[f"meta{i}.W2"]) + vals[f"meta{i}.b2"][:, None, :]
            pattern.append(h.reshape(P, -1) > 0)
            h = _leaky(h)
            out = np.einsum("png,pg->pn", h, vals[f"meta{i}.W3"][:, 0, :]) + vals[f"meta{i}.b3"]
            flat = Ms[i].reshape(P, -1)
            flat[:, idx] = out
    h = np.broadcast_to(case.xs[-1], (P,) + case.xs[-1].shape)
    for i, L in enumerate(model.layers):
        W = vals[f"layer{i}.W"] + (Ms[i] if L.fast else 0.0)
        h = np.einsum("pbi,poi->pbo", h, W) + vals[f"layer{i}.b"][:, None, :]
        if L.activation != "identity":
            pattern.append(h.reshape(P, -1) > 0)
            h = _relu(h) if L.activation == "relu" else _leaky(h)
    z = h - h.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = case.ys[-1]
    losses = -logp[:, np.arange(len(y)), y].mean(axis=1)
    return losses, np.concatenate(pattern, axis=1)


def check_window(case: WindowCase, eps: float = 1e-5) -> CheckResult:
    tape = Tape()
    loss = window_loss(case, tape, record=True)
    params = {**case.model.slow_params(), **case.model.meta_params()}
    analytic = tape.backward(loss, list(params.values()))
    tape.truncate()
    base = {n: p.value[None] for n, p in params.items()}
    _, base_pattern = replay_batched(case, base)

    per_param, kinks, checked = {}, 0, 0
    for name, prm in params.items():
        n = prm.value.size
        num = np.zeros(n)
        todo = np.arange(n)
        h = eps
        for _ in range(3):
            if todo.size == 0:
                break
            P = 2 * todo.size
            vals = {k: np.repeat(v, P, axis=0) for k, v in base.items()}
            flat = vals[name].reshape(P, -1)
            flat[np.arange(todo.size), todo] += h
            flat[np.arange(todo.size) + todo.size, todo] -= h
            losses, pat = replay_batched(case, vals)
            ok = (pat == base_pattern).all(axis=1)
            ok = ok[:todo.size] & ok[todo.size:]
            num[todo[ok]] = (losses[:todo.size] - losses[todo.size:])[ok] / (2 * h)
            todo = todo[~ok]
            h /= 10
        keep = np.ones(n, dtype=bool)
        keep[todo] = False
        kinks += todo.size
        ana = analytic.get(prm, np.zeros(prm.shape)).reshape(-1)
        per_param[name] = rel_error(ana[keep], num[keep])
        checked += int(keep.sum())
    return CheckResult(max(per_param.values()), per_param, checked, kinks)


def run_gradient_suite(n_seeds: int = 100, start: int = 0, **case_kw) -> list[CheckResult]:
    return [check_window(make_case(s, **case_kw)) for s in range(start, start + n_seeds)]
