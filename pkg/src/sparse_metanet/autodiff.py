"""Minimal reverse-mode differentiation on a per-window tape.

Every op lives on a :class:`Tape`.  Values are float64 numpy arrays.  An op
is recorded only when at least one input requires gradients, so constant
computation never grows the tape.  ``Tape.truncate`` drops the whole history
while leaf parameters keep their values, which is what truncated BPTT needs.
"""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

LEAKY_SLOPE = 0.01
ACTIVATIONS = ("identity", "relu", "leaky_relu", "tanh")


class DimensionError(ValueError):
    pass


class TapeStateError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    def __init__(self, message: str, name: str | None = None):
        super().__init__(message)
        self.name = name


class Tensor:
    """Dense float64 array with an optional gradient slot.

    Leaves are created directly; non-leaves come out of tape ops and hold a
    reference to the tape that produced them.
    """

    __slots__ = ("value", "grad", "requires_grad", "name", "tape")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return self.tape is None

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _leaky_slope(pre: np.ndarray) -> np.ndarray:
    # multiplying by a 1/slope array avoids branchy np.where on mixed signs; results are bitwise equal
    s = (pre > 0) * (1.0 - LEAKY_SLOPE)
    s += LEAKY_SLOPE
    return s


def _activate(pre: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return pre
    if kind == "relu":
        return np.maximum(pre, 0.0)
    if kind == "leaky_relu":
        return pre * _leaky_slope(pre)
    if kind == "tanh":
        return np.tanh(pre)
    raise ValueError(f"unknown activation {kind!r}")


def _activation_grad(pre: np.ndarray, out: np.ndarray, g: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return g
    if kind == "relu":
        return g * (pre > 0)
    if kind == "leaky_relu":
        return g * _leaky_slope(pre)
    if kind == "tanh":
        return g * (1.0 - out * out)
    raise ValueError(f"unknown activation {kind!r}")


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive ops for one truncation window."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.live = True
        self.peak_nodes = 0

    def __len__(self) -> int:
        return len(self.nodes)

    # -- bookkeeping -------------------------------------------------------

    def _emit(self, value: np.ndarray, inputs: Iterable[Tensor], backward: Callable) -> Tensor:
        inputs = tuple(inputs)
        out = Tensor(value)
        if any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out.tape = self
            self.nodes.append(_Node(out, inputs, backward))
            if len(self.nodes) > self.peak_nodes:
                self.peak_nodes = len(self.nodes)
        return out

    def truncate(self) -> None:
        """Forget all history.  Idempotent; leaf values are untouched."""
        for node in self.nodes:
            node.out.tape = None
            node.out.requires_grad = False
        self.nodes.clear()

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Populate ``grad`` on every leaf reachable from ``loss``.

        Returns the map leaf -> gradient.  Gradients are fresh for each call
        (no accumulation across calls); within one call, multiple uses of a
        tensor sum their path contributions.  With ``wrt`` given, only paths
        leading to those leaves are traversed.
        """
        if not self.nodes or loss.tape is not self:
            raise TapeStateError("backward needs a loss recorded on a live, non-empty tape")
        if loss.value.size != 1:
            raise DimensionError(f"loss must be scalar, got shape {loss.shape}")
        wanted = None
        if wrt is not None:
            wanted = {id(t) for t in wrt}
            for node in self.nodes:
                if any(id(i) in wanted for i in node.inputs):
                    wanted.add(id(node.out))
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            need = tuple(i.requires_grad and (wanted is None or id(i) in wanted) for i in node.inputs)
            for inp, gi, ok in zip(node.inputs, node.backward(g, need), need):
                if gi is None or not ok:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if inp.is_leaf:
                    leaves[key] = inp
        out = {}
        for key, leaf in leaves.items():
            leaf.grad = grads[key]
            out[leaf] = leaf.grad
        return out

    # -- ops -----------------------------------------------------------------

    def dense(self, x, W: Tensor, b: Tensor | None = None, M=None, activation: str = "identity") -> Tensor:
        """``act(x W^T + x M^T + b)``; the two branches are summed before the nonlinearity."""
        x, W = as_tensor(x), as_tensor(W)
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        xv, Wv = x.value, W.value
        if Wv.ndim != 2 or xv.ndim not in (1, 2) or xv.shape[-1] != Wv.shape[1]:
            raise DimensionError(f"dense: x {xv.shape} incompatible with W {Wv.shape}")
        inputs = [x, W]
        pre = xv @ Wv.T
        if M is not None:
            M = as_tensor(M)
            if M.shape != Wv.shape:
                raise DimensionError(f"dense: M {M.shape} does not match W {Wv.shape}")
            pre = pre + xv @ M.value.T
            inputs.append(M)
        if b is not None:
            b = as_tensor(b)
            if b.shape != (Wv.shape[0],):
                raise DimensionError(f"dense: b {b.shape} does not match W {Wv.shape}")
            pre = pre + b.value
            inputs.append(b)
        if activation == "leaky_relu":
            slope = _leaky_slope(pre)
            out = pre * slope
        else:
            out = _activate(pre, activation)
        has_m, has_b = M is not None, b is not None

        def backward(g, need):
            gp = g * slope if activation == "leaky_relu" else _activation_grad(pre, out, g, activation)
            gp2 = gp if gp.ndim == 2 else gp[None, :]
            x2 = xv if xv.ndim == 2 else xv[None, :]
            gw = gp2.T @ x2 if (need[1] or (has_m and need[2])) else None
            res = []
            if need[0]:
                gx = gp @ Wv
                if has_m:
                    gx = gx + gp @ M.value
                res.append(gx)
            else:
                res.append(None)
            res.append(gw)
            if has_m:
                res.append(gw)
            if has_b:
                res.append(gp2.sum(axis=0) if need[-1] else None)
            return res

        return self._emit(out, inputs, backward)

    def activation(self, x: Tensor, kind: str) -> Tensor:
        x = as_tensor(x)
        pre = x.value
        out = _activate(pre, kind)
        return self._emit(out, (x,), lambda g, _: (_activation_grad(pre, out, g, kind),))

    def add(self, a, b) -> Tensor:
        a, b = as_tensor(a), as_tensor(b)
        sa, sb = a.shape, b.shape
        return self._emit(a.value + b.value, (a, b), lambda g, _: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def sub(self, a, b) -> Tensor:
        a, b = as_tensor(a), as_tensor(b)
        sa, sb = a.shape, b.shape
        return self._emit(a.value - b.value, (a, b), lambda g, _: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))

    def mul(self, a, b) -> Tensor:
        a, b = as_tensor(a), as_tensor(b)
        av, bv = a.value, b.value
        return self._emit(
            av * bv, (a, b),
            lambda g, _: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        )

    def scale(self, a, c: float) -> Tensor:
        a = as_tensor(a)
        return self._emit(a.value * c, (a,), lambda g, _: (g * c,))

    def square(self, a) -> Tensor:
        a = as_tensor(a)
        av = a.value
        return self._emit(av * av, (a,), lambda g, _: (2.0 * av * g,))

    def exp(self, a) -> Tensor:
        a = as_tensor(a)
        out = np.exp(a.value)
        return self._emit(out, (a,), lambda g, _: (g * out,))

    def sum(self, a) -> Tensor:
        a = as_tensor(a)
        shape = a.shape
        return self._emit(np.asarray(a.value.sum()), (a,), lambda g, _: (np.broadcast_to(g, shape).copy(),))

    def mean(self, a) -> Tensor:
        a = as_tensor(a)
        shape, n = a.shape, a.value.size
        return self._emit(
            np.asarray(a.value.mean()), (a,), lambda g, _: (np.full(shape, float(g) / n),)
        )

    def reshape(self, a, shape) -> Tensor:
        a = as_tensor(a)
        old = a.shape
        return self._emit(a.value.reshape(shape), (a,), lambda g, _: (g.reshape(old),))

    def log_softmax(self, a) -> Tensor:
        """Row-wise log-softmax over the last axis."""
        a = as_tensor(a)
        z = a.value - a.value.max(axis=-1, keepdims=True)
        out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        soft = np.exp(out)
        return self._emit(out, (a,), lambda g, _: (g - soft * g.sum(axis=-1, keepdims=True),))

    def pick(self, a, index) -> Tensor:
        """``a[i, index[i]]`` for a 2-D ``a``."""
        a = as_tensor(a)
        index = np.asarray(index, dtype=np.int64)
        rows = np.arange(a.shape[0])
        shape = a.shape

        def backward(g, _):
            out = np.zeros(shape)
            np.add.at(out, (rows, index), g)
            return (out,)

        return self._emit(a.value[rows, index], (a,), backward)

    def scatter(self, values, flat_index, shape) -> Tensor:
        """Dense zeros of ``shape`` holding ``values`` at ``flat_index``."""
        values = as_tensor(values)
        flat_index = np.asarray(flat_index, dtype=np.int64)
        if values.value.shape != flat_index.shape:
            raise DimensionError(f"scatter: {values.shape} values for {flat_index.shape} indices")
        out = np.zeros(int(np.prod(shape)))
        out[flat_index] = values.value
        return self._emit(out.reshape(shape), (values,), lambda g, _: (g.reshape(-1)[flat_index],))

    def where(self, cond, a, b) -> Tensor:
        """Element select: ``a`` where ``cond`` else ``b``.  Selected values are copied exactly."""
        a, b = as_tensor(a), as_tensor(b)
        cond = np.asarray(cond, dtype=bool)
        if not (cond.shape == a.shape == b.shape):
            raise DimensionError(f"where: shapes {cond.shape}, {a.shape}, {b.shape} differ")
        return self._emit(
            np.where(cond, a.value, b.value), (a, b),
            lambda g, _: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)),
        )


def forward_dense(tape: Tape, x, W, M, b, activation: str = "identity") -> Tensor:
    return tape.dense(x, W, b, M, activation)


def softmax_cross_entropy(tape: Tape, logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row softmax."""
    logp = tape.log_softmax(logits)
    return tape.scale(tape.mean(tape.pick(logp, targets)), -1.0)
