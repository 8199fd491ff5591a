"""Dense tensors with reverse-mode automatic differentiation.

Storage is a contiguous row-major numpy array. Every differentiable operation
records its parents and a backward closure; :meth:`Tensor.backward` walks the
tape once in reverse topological order and then releases it.

Two precision modes exist. ``"checking"`` (float64) is used for gradient and
property verification, ``"training"`` (float32) for training runs. Operands of
one operation must share a dtype.
"""
from __future__ import annotations

import contextlib
import math
from collections import Counter
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, NumericError

PRECISIONS = {"checking": np.float64, "training": np.float32}

# FLOP constants: a multiply-add is 2 FLOPs; softmax and layer norm are
# charged per element.
SOFTMAX_FLOPS_PER_ELEMENT = 5
LAYERNORM_FLOPS_PER_ELEMENT = 8

_state = {"dtype": np.float32, "grad": True}
_flop_counters: list[Counter] = []


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    """Set the dtype used for newly created tensors."""
    if mode not in PRECISIONS:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(PRECISIONS)}")
    prev = _state["dtype"]
    _state["dtype"] = PRECISIONS[mode]
    try:
        yield
    finally:
        _state["dtype"] = prev


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@contextlib.contextmanager
def count_flops() -> Iterator[Counter]:
    """Collect FLOPs of matmul, softmax and layer norm calls inside the block.

    Keys are ``"matmul"``, ``"softmax"``, ``"layernorm"``; nested counters all
    receive the counts.
    """
    counter: Counter = Counter()
    _flop_counters.append(counter)
    try:
        yield counter
    finally:
        _flop_counters.remove(counter)


def _charge(kind: str, flops: int) -> None:
    for c in _flop_counters:
        c[kind] += int(flops)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-dimensional array node on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        dtype = dtype or _state["dtype"]
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- construction -----------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        track = _state["grad"] and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    @staticmethod
    def _check_dtype(*ts: "Tensor") -> None:
        dt = ts[0].data.dtype
        for t in ts[1:]:
            if t.data.dtype != dt:
                raise ContractError(f"mixed precision in one graph: {dt} vs {t.data.dtype}")

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            self._check_dtype(self, other)
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype), dtype=self.data.dtype)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # release the tape; leaves keep their grads
        for node in order:
            if node._parents:
                node._parents = ()
                node._backward = None
                node.grad = None if node is not self else node.grad

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = self._lift(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.shape))

        return Tensor._make(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self
        return Tensor._make(-a.data, (a,), lambda g: a._accum(-g))

    def __sub__(self, other) -> "Tensor":
        return self + (-self._lift(other))

    def __rsub__(self, other) -> "Tensor":
        return self._lift(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = self._lift(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.shape))

        return Tensor._make(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            raise NotImplementedError("tensor / tensor is not supported; multiply by a reciprocal")
        return self * (1.0 / other)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, idx) -> "Tensor":
        a = self
        out = a.data[idx]

        def bw(g):
            full = np.zeros_like(a.data)
            full[idx] += g
            a._accum(full)

        return Tensor._make(np.ascontiguousarray(out), (a,), bw)

    # -- shape algebra ----------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        try:
            out = a.data.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
        return Tensor._make(out, (a,), lambda g: a._accum(g.reshape(a.shape)))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        a = self
        inv = tuple(np.argsort(axes))
        out = np.ascontiguousarray(a.data.transpose(axes))
        return Tensor._make(out, (a,), lambda g: a._accum(g.transpose(inv)))

    def swap_last(self) -> "Tensor":
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(axes)

    def broadcast_to(self, shape) -> "Tensor":
        a = self
        shape = tuple(shape)
        out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
        return Tensor._make(out, (a,), lambda g: a._accum(_unbroadcast(g, a.shape)))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.shape))

        return Tensor._make(out, (a,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else int(np.prod([self.shape[i] for i in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


# ---------------------------------------------------------------------------
# free functions


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    Tensor._check_dtype(a, b)
    out = np.matmul(a.data, b.data)
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    batch = int(np.prod(out.shape[:-2], dtype=np.int64))
    _charge("matmul", 2 * batch * m * k * n)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            if b.ndim == 2:
                b._accum(a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                b._accum(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return Tensor._make(out, (a, b), bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    Tensor._check_dtype(*tensors)
    axis = axis % tensors[0].ndim
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return Tensor._make(out, tensors, bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows received NaN input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    _charge("softmax", SOFTMAX_FLOPS_PER_ELEMENT * y.size)

    def bw(g):
        x._accum(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return Tensor._make(y, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm parameters {gamma.shape}/{beta.shape} do not match channels {c}")
    Tensor._check_dtype(x, gamma, beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data
    _charge("layernorm", LAYERNORM_FLOPS_PER_ELEMENT * y.size)

    def bw(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).reshape(-1, c).sum(axis=0))
        if beta.requires_grad:
            beta._accum(g.reshape(-1, c).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            x._accum(inv * (gx - gx.mean(axis=-1, keepdims=True)
                            - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return Tensor._make(y, (x, gamma, beta), bw)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    y = x.data * cdf

    def bw(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        x._accum(g * (cdf + x.data * pdf))

    return Tensor._make(y.astype(x.dtype, copy=False), (x,), bw)


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = -1) -> Tensor:
    """Mean softmax cross-entropy over rows whose label is not ``ignore_index``.

    ``logits`` is (N, K), ``labels`` an integer array of length N. A batch with
    every row ignored yields a zero loss with zero gradient.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (N, K) logits, got {logits.shape}")
    labels = np.asarray(labels).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise DimensionError(f"{n} logit rows vs {labels.shape[0]} labels")
    valid = labels != ignore_index
    if np.any((labels[valid] < 0) | (labels[valid] >= k)):
        raise ValueError(f"labels must lie in [0, {k}) or equal ignore_index")
    count = int(valid.sum())
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    safe = np.where(valid, labels, 0)
    nll = lse - shifted[np.arange(n), safe]
    loss = nll[valid].sum() / count if count else 0.0
    if not np.isfinite(loss):
        raise NumericError("cross_entropy produced a non-finite loss")

    def bw(g):
        if count == 0:
            logits._accum(np.zeros_like(x))
            return
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), safe] -= 1.0
        p[~valid] = 0.0
        logits._accum(p * (g / count))

    return Tensor._make(np.asarray(loss, dtype=x.dtype), (logits,), bw)
