"""Reverse-mode automatic differentiation over numpy arrays.

Provides exactly the operations the model graph needs, a define-by-run
Tape rebuilt per forward pass, and an independent central finite-difference
oracle for verifying every analytic gradient.

All math runs in float64; gradient checking needs the precision headroom
and desk-scale models don't need float32 speed.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

DTYPE = np.float64

# tanh-approximation GELU constants (the single canonical formula used
# everywhere in this package):
#   gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
GELU_K0 = math.sqrt(2.0 / math.pi)
GELU_K1 = 0.044715


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    Trainable tensors are always leaves (never produced by an op); they
    carry a same-shape ``grad`` buffer that ``Tape.backward`` accumulates
    into. Non-trainable tensors never get a grad buffer.
    """

    __slots__ = ("data", "grad", "trainable", "name", "_tape")

    def __init__(self, data, trainable: bool = False, name: str = ""):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=DTYPE))
        self.trainable = trainable
        self.name = name
        self.grad: Optional[np.ndarray] = (
            np.zeros_like(self.data) if trainable else None
        )
        self._tape: Optional["Tape"] = None  # tape that recorded the producing op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def freeze(self) -> None:
        """Make the tensor non-trainable and drop its grad buffer."""
        self.trainable = False
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, trainable={self.trainable}{tag})"


class _Node:
    """One recorded op: output, inputs, and the vector-Jacobian product."""

    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple, vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_TAPE_STACK: list["Tape"] = []


def active_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Define-by-run record of executed ops, rebuilt per forward pass.

    Execution order is a topological order, so iterating ``nodes`` in
    reverse visits each node exactly once in reverse topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def record(self, out: Tensor, inputs: tuple, vjp: Callable) -> None:
        out._tape = self
        self.nodes.append(_Node(out, inputs, vjp))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(param) into every trainable leaf's grad.

        Trainable tensors not on any path to ``loss`` are left untouched
        (their grad buffers stay whatever they were, zeros after reset).
        """
        if loss.data.size != 1:
            raise ContractError(
                f"backward needs a scalar loss, got shape {loss.shape}"
            )
        adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        if loss.trainable:
            loss.grad += adjoints[id(loss)]
        for node in reversed(self.nodes):
            g = adjoints.pop(id(node.out), None)
            if g is None:
                continue
            grads = node.vjp(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None:
                    continue
                if inp.trainable:
                    inp.grad += gi
                elif inp._tape is self:
                    acc = adjoints.get(id(inp))
                    if acc is None:
                        adjoints[id(inp)] = gi.copy() if gi is g else gi
                    else:
                        acc += gi


def _tracks(t: Tensor) -> bool:
    tape = active_tape()
    return tape is not None and (t.trainable or t._tape is tape)


def _make(data: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.trainable = False
    out.grad = None
    out.name = ""
    out._tape = None
    if any(_tracks(t) for t in inputs):
        active_tape().record(out, inputs, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), vjp)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    data = x.data * s

    def vjp(g):
        return (g * s,)

    return _make(data, (x,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dims broadcast (numpy ``@`` semantics)."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(
            f"matmul needs >=2-d operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}"
        )
    data = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(data, (a, b), vjp)


# ---------------------------------------------------------------------------
# shape ops


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.transpose(x.data, axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _make(data, (x,), vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    data = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(old),)

    return _make(data, (x,), vjp)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    data = np.broadcast_to(x.data, shape).copy()

    def vjp(g):
        return (_unbroadcast(g, old),)

    return _make(data, (x,), vjp)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ContractError("concat needs at least one tensor")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(parts), vjp)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = x.data[idx].copy()

    def vjp(g):
        out = np.zeros_like(x.data)
        out[idx] = g
        return (out,)

    return _make(data, (x,), vjp)


# ---------------------------------------------------------------------------
# reductions and nonlinearities


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, x.data.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axes)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return _make(data, (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, x.data.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    data = x.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axes)
        return (np.broadcast_to(gg, x.shape).copy() / count,)

    return _make(data, (x,), vjp)


def gelu(x: Tensor) -> Tensor:
    u = GELU_K0 * (x.data + GELU_K1 * x.data**3)
    t = np.tanh(u)
    data = 0.5 * x.data * (1.0 + t)

    def vjp(g):
        du = GELU_K0 * (1.0 + 3.0 * GELU_K1 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t**2) * du),)

    return _make(data, (x,), vjp)


def softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for {x.shape}")
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return ((g - dot) * data,)

    return _make(data, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm gain/bias {gain.shape}/{bias.shape} do not match "
            f"feature dim {d} of input {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _make(data, (x, gain, bias), vjp)


def cross_entropy_from_logits(
    logits: Tensor,
    labels: np.ndarray,
    class_mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Mean negative log-likelihood over a batch of rows of logits.

    ``class_mask`` (bool per class, True = allowed) restricts the softmax
    to a subset of classes; every label must be an allowed class.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects [batch x classes], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ContractError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= c:
        raise ContractError("label outside class range")
    z = logits.data
    if class_mask is not None:
        class_mask = np.asarray(class_mask, dtype=bool)
        if class_mask.shape != (c,):
            raise DimensionError(f"class_mask shape {class_mask.shape} != ({c},)")
        if not class_mask[labels].all():
            raise ContractError("label refers to a masked-out class")
        z = np.where(class_mask, z, -np.inf)
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    denom = e.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(denom)
    data = np.asarray(-logp[np.arange(b), labels].mean())
    if not np.isfinite(data):
        raise NumericError("non-finite cross-entropy loss")
    probs = e / denom

    def vjp(g):
        dl = probs.copy()
        dl[np.arange(b), labels] -= 1.0
        if class_mask is not None:
            dl[:, ~class_mask] = 0.0
        return (dl * (float(g) / b),)

    return _make(data, (logits,), vjp)


# ---------------------------------------------------------------------------
# verification oracle


def finite_diff_grad(f: Callable[[], float], theta: Tensor, eps: float) -> np.ndarray:
    """Central finite differences of a deterministic scalar ``f`` wrt theta.

    Perturbs ``theta.data`` in place one coordinate at a time, so ``f``
    must re-run the forward pass on each call. Independent of the tape.
    """
    if eps <= 0:
        raise ContractError("finite_diff_grad needs eps > 0")
    flat = theta.data.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f())
        flat[i] = orig - eps
        fm = float(f())
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(theta.shape)


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - b_i| / max(floor, |a_i|, |b_i|)."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
