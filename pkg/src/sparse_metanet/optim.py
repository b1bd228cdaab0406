"""First-order optimizers over named leaf tensors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import NumericError, Tensor

KINDS = ("sgd", "adam", "rmsprop")


@dataclass
class OptimizerSpec:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    decay: float = 0.99
    eps: float = 1e-8

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer {self.kind!r}; expected one of {KINDS}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


class Optimizer:
    """Holds moment buffers for a fixed parameter set and applies one rule.

    Parameters missing from a gradient map are treated as having zero
    gradient.  Non-finite gradients raise :class:`NumericError` before any
    parameter is touched.
    """

    def __init__(self, spec: OptimizerSpec, params: dict[str, Tensor]):
        self.spec = spec
        self.params = dict(params)
        self.reset()

    @property
    def kind(self) -> str:
        return self.spec.kind

    @property
    def learning_rate(self) -> float:
        return self.spec.lr

    def reset(self) -> None:
        self.step_count = 0
        self.m = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in self.params.items()}

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        gmap = {}
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.value)
            elif g.shape != p.value.shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.value.shape}")
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name}", name=name)
            gmap[name] = g
        self.step_count += 1
        s = self.spec
        t = self.step_count
        for name, p in self.params.items():
            g = gmap[name]
            if s.kind == "sgd":
                p.value -= s.lr * g
            elif s.kind == "adam":
                m = self.m[name] = s.beta1 * self.m[name] + (1.0 - s.beta1) * g
                v = self.v[name] = s.beta2 * self.v[name] + (1.0 - s.beta2) * g * g
                m_hat = m / (1.0 - s.beta1 ** t)
                v_hat = v / (1.0 - s.beta2 ** t)
                p.value -= s.lr * m_hat / (np.sqrt(v_hat) + s.eps)
            else:
                v = self.v[name] = s.decay * self.v[name] + (1.0 - s.decay) * g * g
                p.value -= s.lr * g / (np.sqrt(v) + s.eps)


def optimizer_step(opt: Optimizer, grads: dict[Tensor, np.ndarray]) -> None:
    opt.step(grads)
