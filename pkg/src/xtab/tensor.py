"""Minimal reverse-mode autodiff over numpy arrays.

Every op builds a node holding its parents and a closure that maps the output
gradient to one gradient per parent.  ``Tensor.backward`` walks the graph in
reverse topological order and frees it afterwards.  Composite ops that appear
in every transformer block (``linear``, ``layer_norm``, ``softmax``,
``reglu``, the fused losses) have hand-written backward passes so a forward
step stays at a few dozen graph nodes.
"""

from __future__ import annotations

import contextlib
import math
import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "Tensor",
    "ParamSet",
    "OptimizerState",
    "verification_mode",
    "set_verification_mode",
    "is_verification_mode",
    "default_dtype",
    "no_grad",
    "matmul",
    "linear",
    "softmax",
    "log_softmax",
    "layer_norm",
    "reglu",
    "relu",
    "dropout",
    "concat",
    "embedding",
    "numeric_tokens",
    "l2_normalize",
    "cross_entropy",
    "bce_with_logits",
    "mse",
    "adamw_step",
    "sgd_step",
    "kaiming_init",
    "zeros_init",
    "numerical_grad",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a forward value or gradient."""


# f64 verification mode is process-wide; grad recording is per thread so
# concurrent clients can run eval passes without interfering.
_VERIFY = os.environ.get("XTAB_VERIFY", "") not in ("", "0")
_local = threading.local()


def set_verification_mode(enabled: bool) -> None:
    global _VERIFY
    _VERIFY = bool(enabled)


def is_verification_mode() -> bool:
    return _VERIFY


def default_dtype() -> type:
    return np.float64 if _VERIFY else np.float32


@contextlib.contextmanager
def verification_mode(enabled: bool = True) -> Iterator[None]:
    """Temporarily switch every new tensor to float64."""
    previous = _VERIFY
    set_verification_mode(enabled)
    try:
        yield
    finally:
        set_verification_mode(previous)


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    previous = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Dense array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        if _grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- graph traversal ----------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every reachable tensor that requires grad."""
        if self.data.size != 1 or self.data.ndim > 1:
            raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
        _check_finite(self.data, "loss")
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=parent.data.dtype, copy=True)
                else:
                    parent.grad = parent.grad + g
            # interior nodes: drop graph and intermediate gradient
            node._parents = ()
            node._backward = None
            node.grad = None
        for node in order:
            if node.grad is not None:
                _check_finite(node.grad, "gradient")

    # -- elementwise arithmetic ----------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other, self.data.dtype)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._result(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = _as_tensor(other, self.data.dtype)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._result(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
        )

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other, self.data.dtype) - self

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other, self.data.dtype)
        a, b = self.data, other.data
        return Tensor._result(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _as_tensor(other, self.data.dtype)
        a, b = self.data, other.data
        return Tensor._result(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
        )

    def __neg__(self) -> "Tensor":
        return Tensor._result(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float) -> "Tensor":
        a = self.data
        return Tensor._result(a**exponent, (self,), lambda g: (g * exponent * a ** (exponent - 1),))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._result(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._result(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._result(out, (self,), lambda g: (g * 0.5 / out,))

    # -- reductions -----------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._result(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = math.prod(self.shape[a] for a in axes)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- movement -------------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return Tensor._result(self.data.reshape(shape), (self,), lambda g: (g.reshape(original),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._result(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    @property
    def T(self) -> "Tensor":
        return self.swapaxes(-1, -2)

    def broadcast_to(self, shape) -> "Tensor":
        original = self.shape
        return Tensor._result(
            np.broadcast_to(self.data, shape), (self,), lambda g: (_unbroadcast(g, original),)
        )

    def __getitem__(self, index) -> "Tensor":
        shape, dtype = self.shape, self.data.dtype
        parts = index if isinstance(index, tuple) else (index,)
        fancy = any(isinstance(p, (list, np.ndarray)) for p in parts)

        def bw(g):
            full = np.zeros(shape, dtype=dtype)
            if fancy:
                np.add.at(full, index, g)
            else:
                full[index] = g
            return (full,)

        return Tensor._result(np.asarray(self.data[index]), (self,), bw)


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype), dtype=dtype)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return Tensor._result(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight of shape (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ wd.T if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, bw)


# ---------------------------------------------------------------------------
# activations and normalisation


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._result(x.data * mask, (x,), lambda g: (g * mask,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "softmax input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "log_softmax input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis with population variance, then scale and shift."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm affine params must have shape ({x.shape[-1]},)")
    xd = x.data
    mean = xd.mean(axis=-1, keepdims=True)
    centered = xd - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gg = (g2 * xhat.reshape(g2.shape)).sum(axis=0)
        gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return (gx, gg, gb)

    return Tensor._result(out, (x, gain, bias), bw)


def reglu(x: Tensor) -> Tensor:
    """Split the last axis in half: ``first * relu(second)``."""
    width = x.shape[-1]
    if width % 2:
        raise ShapeError(f"reglu needs an even last dimension, got {width}")
    half = width // 2
    a, b = x.data[..., :half], x.data[..., half:]
    gate = b > 0
    rb = b * gate
    out = a * rb

    def bw(g):
        return (np.concatenate([g * rb, g * a * gate], axis=-1),)

    return Tensor._result(out, (x,), bw)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return Tensor._result(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# structural helpers


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    arrays = [t.data for t in tensors]
    out = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(out, tuple(tensors), bw)


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup ``table[indices]``; indices are plain integers (no gradient)."""
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0]})")
    shape, dtype = table.shape, table.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, indices.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return Tensor._result(table.data[indices], (table,), bw)


def numeric_tokens(values: np.ndarray, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-column affine tokens: ``values[b, k] * weight[k] + bias[k]``.

    ``values`` is (B, k) and constant; ``weight``/``bias`` are (k, d).
    """
    values = np.asarray(values, dtype=weight.data.dtype)
    if values.ndim != 2 or values.shape[1] != weight.shape[0]:
        raise ShapeError(f"numeric_tokens: values {values.shape} vs weight {weight.shape}")
    v = values[:, :, None]
    out = v * weight.data + bias.data

    def bw(g):
        return ((g * v).sum(axis=0), g.sum(axis=0))

    return Tensor._result(out, (weight, bias), bw)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """``x / max(||x||, eps)`` along ``axis``."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    clamped = norm < eps
    denom = np.where(clamped, eps, norm)
    out = xd / denom

    def bw(g):
        radial = (g * out).sum(axis=axis, keepdims=True)
        gx = np.where(clamped, g / denom, (g - out * radial) / denom)
        return (gx,)

    return Tensor._result(out, (x,), bw)


# ---------------------------------------------------------------------------
# fused losses (all return scalar tensors averaged over the batch)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of (B, C) logits against integer targets."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ValueError("cross_entropy target outside [0, C)")
    _check_finite(logits.data, "cross_entropy logits")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(z.shape[0])
    n = z.shape[0]
    loss = -logp[rows, targets].mean()

    def bw(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        return (grad * (g / n),)

    return Tensor._result(np.asarray(loss, dtype=z.dtype), (logits,), bw)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean logistic loss of a single logit per row against {0, 1} targets."""
    z = logits.data.reshape(-1)
    y = np.asarray(targets, dtype=z.dtype).reshape(-1)
    if y.shape != z.shape:
        raise ShapeError(f"bce_with_logits: {logits.shape} logits vs {np.shape(targets)} targets")
    _check_finite(z, "bce logits")
    n = z.shape[0]
    loss = (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean()
    shape = logits.shape

    def bw(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))
        return (((sig - y) * (g / n)).reshape(shape),)

    return Tensor._result(np.asarray(loss, dtype=z.dtype), (logits,), bw)


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    target = np.asarray(target, dtype=pred.data.dtype).reshape(pred.shape)
    diff = pred.data - target
    n = diff.size
    shape = pred.shape

    def bw(g):
        return ((2.0 * g / n) * diff.reshape(shape),)

    return Tensor._result(np.asarray((diff * diff).mean(), dtype=diff.dtype), (pred,), bw)


# ---------------------------------------------------------------------------
# parameters, initialisation and optimisers


class ParamSet:
    """Ordered named parameters with shared / weight-decay flags."""

    def __init__(self) -> None:
        self._tensors: dict[str, Tensor] = {}
        self._shared: dict[str, bool] = {}
        self._decay: dict[str, bool] = {}

    def add(self, name: str, tensor: Tensor, *, shared: bool = False, decay: bool = False) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._tensors[name] = tensor
        self._shared[name] = shared
        self._decay[name] = decay
        return tensor

    def update(self, other: "ParamSet") -> None:
        for name in other.names():
            self.add(name, other[name], shared=other.is_shared(name), decay=other.applies_decay(name))

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._tensors.items()

    def is_shared(self, name: str) -> bool:
        return self._shared[name]

    def set_shared(self, name: str, shared: bool) -> None:
        self._shared[name] = shared

    def applies_decay(self, name: str) -> bool:
        return self._decay[name]

    def shared_names(self) -> list[str]:
        return [n for n in self._tensors if self._shared[n]]

    def num_elements(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def state_dict(self, names: Iterable[str] | None = None) -> dict[str, np.ndarray]:
        names = self._tensors if names is None else names
        return {n: self._tensors[n].data.copy() for n in names}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        for name, value in state.items():
            if name not in self._tensors:
                if strict:
                    raise KeyError(f"unknown parameter {name!r}")
                continue
            target = self._tensors[name]
            if value.shape != target.shape:
                raise ShapeError(f"{name}: shape {value.shape} != {target.shape}")
            target.data = np.array(value, dtype=target.data.dtype, copy=True)

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None


@dataclass
class OptimizerState:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def _collect_grads(params: ParamSet) -> list[tuple[str, Tensor, np.ndarray]]:
    out = []
    for name, t in params.items():
        if t.grad is None:
            raise RuntimeError(f"parameter {name!r} has no gradient; call backward() first")
        _check_finite(t.grad, f"gradient of {name}")
        out.append((name, t, t.grad))
    return out


def adamw_step(params: ParamSet, state: OptimizerState) -> None:
    """One AdamW update; decay is decoupled and only hits decay-flagged params."""
    grads = _collect_grads(params)
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, t, g in grads:
        m = state.first_moment.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            v = np.zeros_like(t.data)
        else:
            v = state.second_moment[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        w = t.data
        if state.weight_decay and params.applies_decay(name):
            w = w * (1.0 - state.lr * state.weight_decay)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        t.data = (w - state.lr * update).astype(t.data.dtype, copy=False)
        _check_finite(t.data, name)
    params.zero_grad()


def sgd_step(params: ParamSet, lr: float) -> None:
    """Plain ``w <- w - lr * grad``."""
    for name, t, g in _collect_grads(params):
        t.data = (t.data - lr * g).astype(t.data.dtype, copy=False)
        _check_finite(t.data, name)
    params.zero_grad()


def kaiming_init(shape, fan_in: int, rng: np.random.Generator) -> Tensor:
    """Kaiming-uniform weights in ``[-sqrt(6/fan_in), sqrt(6/fan_in)]``."""
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape))


def zeros_init(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def numerical_grad(fn: Callable[[], float], tensor: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. ``tensor.data``."""
    grad = np.zeros(tensor.shape, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    if not np.shares_memory(flat, tensor.data):
        raise ValueError("numerical_grad needs a contiguous tensor")
    out = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = fn()
        flat[i] = old - eps
        down = fn()
        flat[i] = old
        out[i] = (up - down) / (2 * eps)
    return grad
