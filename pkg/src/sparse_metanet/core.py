"""Fast-weight layers, the coordinate-wise meta-learner and sparse generation.

A :class:`FastWeightLayer` computes ``act(W h + M h + b)``.  ``M`` is not
touched by any optimizer; it is rewritten a few coordinates at a time by a
small per-layer :class:`MetaLearner` that reads the (preprocessed) running
gradient average of ``W``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DimensionError, NumericError, Tape, Tensor, _leaky_slope, parameter

PREPROC_RHO = 10.0
META_HIDDEN = 20
CARRY_MODES = ("carry", "reset")


@dataclass
class FastWeightConfig:
    gamma: float = 0.9
    beta1: float = 0.5
    beta2: float = 0.5
    p_train: float = 0.3
    p_eval: float = 0.3
    carry_mode: str = "carry"
    # evaluation-time overrides; None means "same as training"
    eval_gamma: float | None = None
    eval_beta1: float | None = None
    eval_beta2: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        for name in ("p_train", "p_eval"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.carry_mode not in CARRY_MODES:
            raise ValueError(f"carry_mode must be one of {CARRY_MODES}")

    def for_eval(self) -> "FastWeightConfig":
        """Config with the evaluation columns swapped in (p_train := p_eval)."""
        pick = lambda v, d: d if v is None else v  # noqa: E731
        return FastWeightConfig(
            gamma=pick(self.eval_gamma, self.gamma),
            beta1=pick(self.eval_beta1, self.beta1),
            beta2=pick(self.eval_beta2, self.beta2),
            p_train=self.p_eval,
            p_eval=self.p_eval,
            carry_mode=self.carry_mode,
        )


# -- gradient preprocessing ------------------------------------------------------


def preprocess_gradient(g, rho: float = PREPROC_RHO) -> np.ndarray:
    """Map gradient values to ``(..., 2)`` features.

    ``(log|g| / rho, sign g)`` when ``|g| >= exp(-rho)``, else ``(-1, exp(rho) g)``.
    """
    g = np.asarray(g, dtype=np.float64)
    if np.isnan(g).any():
        raise NumericError("NaN gradient passed to preprocessing")
    mag = np.abs(g)
    big = mag >= np.exp(-rho)
    with np.errstate(divide="ignore"):
        first = np.where(big, np.log(np.where(big, mag, 1.0)) / rho, -1.0)
    second = np.where(big, np.sign(g), np.exp(rho) * g)
    return np.stack([first, second], axis=-1)


# -- meta-learner ---------------------------------------------------------------


class MetaLearner:
    """Three-layer coordinate-wise MLP ``2 -> 20 -> 20 -> 1`` with LeakyReLU.

    The same weights are applied to every coordinate of the fast-weight
    matrix it serves.
    """

    names = ("W1", "b1", "W2", "b2", "W3", "b3")

    def __init__(self, rng: np.random.Generator, feature_dim: int = 2, hidden: int = META_HIDDEN,
                 output_scale: float = 0.01):
        def uniform(shape, fan_in):
            lim = 0.1 / np.sqrt(fan_in)
            return rng.uniform(-lim, lim, size=shape)

        self.W1 = parameter(uniform((hidden, feature_dim), feature_dim), "W1")
        self.b1 = parameter(np.zeros(hidden), "b1")
        self.W2 = parameter(uniform((hidden, hidden), hidden), "W2")
        self.b2 = parameter(np.zeros(hidden), "b2")
        self.W3 = parameter(output_scale * uniform((1, hidden), hidden), "W3")
        self.b3 = parameter(np.zeros(1), "b3")
        self.n_evals = 0

    @property
    def feature_dim(self) -> int:
        return self.W1.shape[1]

    def params(self) -> dict[str, Tensor]:
        return {n: getattr(self, n) for n in self.names}

    def forward(self, tape: Tape, features) -> Tensor:
        """Differentiable forward over an ``(n, feature_dim)`` batch of coordinates."""
        h = tape.dense(features, self.W1, self.b1, activation="leaky_relu")
        h = tape.dense(h, self.W2, self.b2, activation="leaky_relu")
        out = tape.dense(h, self.W3, self.b3)
        return tape.reshape(out, (out.shape[0],))

    def __call__(self, features) -> np.ndarray:
        """Pure numpy evaluation, no tape."""
        return meta_forward(self, features)


def _leaky(x):
    return x * _leaky_slope(x)


def meta_forward(ml: MetaLearner, feature) -> np.ndarray | float:
    """Evaluate the meta-learner on one feature vector or a stack of them."""
    f = np.asarray(feature, dtype=np.float64)
    if f.shape[-1] != ml.feature_dim:
        raise DimensionError(f"meta_forward: feature dim {f.shape[-1]} != {ml.feature_dim}")
    h = _leaky(f @ ml.W1.value.T + ml.b1.value)
    h = _leaky(h @ ml.W2.value.T + ml.b2.value)
    out = (h @ ml.W3.value.T + ml.b3.value)[..., 0]
    return float(out) if out.ndim == 0 else out


# -- masks and fast-weight updates --------------------------------------------------


@dataclass
class SparseMask:
    bits: np.ndarray
    p: float

    @property
    def shape(self) -> tuple[int, ...]:
        return self.bits.shape

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.bits))


def sample_mask(rng: np.random.Generator, shape, p: float) -> SparseMask:
    """Element-wise Bernoulli(p).  ``p == 0`` consumes no random draws."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"mask probability must lie in [0, 1], got {p}")
    if p == 0.0:
        return SparseMask(np.zeros(shape, dtype=bool), p)
    return SparseMask(rng.random(shape) < p, p)


def update_gradient_average(I: np.ndarray, grad: np.ndarray, gamma: float, beta1: float) -> np.ndarray:
    if I.shape != grad.shape:
        raise DimensionError(f"gradient average {I.shape} vs gradient {grad.shape}")
    return gamma * I + beta1 * grad


class FastWeightLayer:
    """Dense layer with a slow branch (W, b) and a fast branch M.

    ``M`` is either a constant array-backed tensor or, inside a training
    window, a tape tensor depending on meta-learner weights.  ``I`` is the
    gradient moving average for ``W`` and is always a plain array.
    """

    def __init__(self, in_dim: int, out_dim: int, activation: str, rng: np.random.Generator,
                 fast: bool = True):
        lim = np.sqrt(6.0 / (in_dim + out_dim))
        self.W = parameter(rng.uniform(-lim, lim, size=(out_dim, in_dim)), "W")
        self.b = parameter(np.zeros(out_dim), "b")
        self.activation = activation
        self.fast = fast
        self.M = Tensor(np.zeros((out_dim, in_dim)))
        self.I = np.zeros((out_dim, in_dim))

    @property
    def shape(self) -> tuple[int, int]:
        return self.W.shape

    def reset_fast(self) -> None:
        self.M = Tensor(np.zeros(self.shape))
        self.I = np.zeros(self.shape)

    def detach_fast(self) -> None:
        self.M = Tensor(self.M.value.copy())

    def forward(self, tape: Tape, x) -> Tensor:
        return layer_forward(tape, self, x)


def layer_forward(tape: Tape, layer: FastWeightLayer, x) -> Tensor:
    M = layer.M if layer.fast else None
    return tape.dense(x, layer.W, layer.b, M, layer.activation)


def generate_sparse_fast_weights(tape: Tape | None, layer: FastWeightLayer, grad: np.ndarray,
                                 mask: SparseMask, cfg: FastWeightConfig, ml: MetaLearner) -> Tensor:
    """Run the meta-learner on masked coordinates only; zeros elsewhere.

    The meta-learner input ``I + beta2 * grad`` is a constant: no gradient
    reaches ``grad`` or ``I``.  With ``tape=None`` nothing is recorded.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != layer.shape or mask.shape != layer.shape:
        raise DimensionError(f"generate: grad {grad.shape}, mask {mask.shape}, layer {layer.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient in fast-weight generation")
    idx = np.flatnonzero(mask.bits)
    if idx.size == 0:
        return Tensor(np.zeros(layer.shape))
    combined = layer.I.reshape(-1)[idx] + cfg.beta2 * grad.reshape(-1)[idx]
    feats = preprocess_gradient(combined)
    ml.n_evals += idx.size
    if tape is None:
        out = np.zeros(layer.shape)
        out.reshape(-1)[idx] = meta_forward(ml, feats)
        return Tensor(out)
    return tape.scatter(ml.forward(tape, feats), idx, layer.shape)


def accumulate_fast_weights(tape: Tape | None, M_prev, M_sparse, mask: SparseMask) -> Tensor:
    """``(1 - A) * M_prev + M_sparse`` computed as an exact select."""
    M_prev = M_prev if isinstance(M_prev, Tensor) else Tensor(M_prev)
    M_sparse = M_sparse if isinstance(M_sparse, Tensor) else Tensor(M_sparse)
    if not (M_prev.shape == M_sparse.shape == mask.shape):
        raise DimensionError(f"accumulate: {M_prev.shape}, {M_sparse.shape}, {mask.shape}")
    if tape is None:
        return Tensor(np.where(mask.bits, M_sparse.value, M_prev.value))
    return tape.where(mask.bits, M_sparse, M_prev)


# -- networks ---------------------------------------------------------------------


@dataclass
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str
    fast: bool = True


class FastWeightNet:
    """Container of fast-weight layers plus one meta-learner per fast branch.

    Subclasses define ``forward(tape, x)``.  ``layers`` order fixes the
    checkpoint key names.
    """

    def __init__(self, specs: list[LayerSpec], seed: int, fast: bool = True):
        rng = np.random.default_rng([seed, 0])
        self.layers = [FastWeightLayer(s.in_dim, s.out_dim, s.activation, rng, fast and s.fast)
                       for s in specs]
        self.metas: list[MetaLearner | None] = [
            MetaLearner(rng) if layer.fast else None for layer in self.layers
        ]
        self.specs = specs
        self.seed = seed

    def slow_params(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"layer{i}.W"] = layer.W
            out[f"layer{i}.b"] = layer.b
        return out

    def meta_params(self) -> dict[str, Tensor]:
        out = {}
        for i, ml in enumerate(self.metas):
            if ml is not None:
                for n, p in ml.params().items():
                    out[f"meta{i}.{n}"] = p
        return out

    def reset_fast(self) -> None:
        for layer in self.layers:
            layer.reset_fast()

    def meta_evals(self) -> int:
        return sum(ml.n_evals for ml in self.metas if ml is not None)


class MLP(FastWeightNet):
    """Plain stack of fast-weight layers producing logits."""

    def __init__(self, sizes: list[int], seed: int, activation: str = "relu", fast: bool = True,
                 fast_last: bool = True):
        specs = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            specs.append(LayerSpec(a, b, "identity" if last else activation, fast_last or not last))
        super().__init__(specs, seed, fast)
        self.sizes = list(sizes)

    def forward(self, tape: Tape, x) -> Tensor:
        h = x
        for layer in self.layers:
            h = layer_forward(tape, layer, h)
        return h


class ActorCriticNet(FastWeightNet):
    """Shared trunk with a policy head (logits) and a scalar value head."""

    def __init__(self, in_dim: int, hidden: list[int], n_actions: int, seed: int,
                 activation: str = "relu", fast: bool = True):
        dims = [in_dim] + list(hidden)
        specs = [LayerSpec(a, b, activation) for a, b in zip(dims[:-1], dims[1:])]
        specs.append(LayerSpec(dims[-1], n_actions, "identity"))
        specs.append(LayerSpec(dims[-1], 1, "identity"))
        super().__init__(specs, seed, fast)
        self.in_dim, self.hidden, self.n_actions = in_dim, list(hidden), n_actions

    def trunk(self, tape: Tape, x) -> list[Tensor]:
        acts = []
        h = x
        for layer in self.layers[:-2]:
            h = layer_forward(tape, layer, h)
            acts.append(h)
        return acts

    def forward(self, tape: Tape, x) -> tuple[Tensor, Tensor]:
        h = self.trunk(tape, x)[-1]
        logits = layer_forward(tape, self.layers[-2], h)
        value = layer_forward(tape, self.layers[-1], h)
        return logits, value
