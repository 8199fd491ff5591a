"""Transformer building blocks: linear layers, layer norm, MLP, multi-head attention."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .errors import ConfigError
from .rng import trunc_normal
from .tensor import Tensor, gelu, layer_norm, softmax_rows

INIT_STD = 0.02


class Module:
    """Parameter container. Parameters and submodules are discovered from
    instance attributes in assignment order, so naming is deterministic."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, std: float = INIT_STD,
                 bias: bool = True):
        self.weight = param(trunc_normal(rng, (c_in, c_out), std))
        self.bias = param(np.zeros(c_out)) if bias else None

    @property
    def c_in(self) -> int:
        return self.weight.shape[0]

    @property
    def c_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, c: int):
        self.gamma = param(np.ones(c))
        self.beta = param(np.zeros(c))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class MLP(Module):
    def __init__(self, c: int, rng: np.random.Generator, ratio: int = 4):
        self.fc1 = Linear(c, ratio * c, rng)
        self.fc2 = Linear(ratio * c, c, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``heads`` heads of width ``c // heads``.

    Called with one sequence it is self-attention; with ``context`` it is
    cross-attention (queries from ``x``, keys and values from ``context``).
    The key projection has no bias: a key bias shifts every score of a row by
    the same amount and cancels in the softmax.
    With ``capture=True`` the head-averaged attention matrix is returned as a
    numpy array of shape (..., n_q, n_kv).
    """

    def __init__(self, c: int, heads: int, rng: np.random.Generator):
        if heads < 1 or c % heads:
            raise ConfigError(f"channels {c} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(c, c, rng)
        self.k = Linear(c, c, rng, bias=False)
        self.v = Linear(c, c, rng)
        self.o = Linear(c, c, rng)

    @property
    def channels(self) -> int:
        return self.q.c_in

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, c = x.shape
        d = c // self.heads
        x = x.reshape(*lead, n, self.heads, d)
        axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
        return x.transpose(axes)

    def _merge(self, x: Tensor) -> Tensor:
        *lead, m, n, d = x.shape
        axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
        return x.transpose(axes).reshape(*lead, n, m * d)

    def __call__(self, x: Tensor, context: Tensor | None = None, capture: bool = False):
        kv = x if context is None else context
        if kv.shape[-1] != x.shape[-1] or x.shape[-1] != self.channels:
            raise ConfigError(f"channel mismatch: queries {x.shape[-1]}, keys/values {kv.shape[-1]}, "
                              f"layer {self.channels}")
        d = self.channels // self.heads
        q = self._split(self.q(x))
        k = self._split(self.k(kv))
        v = self._split(self.v(kv))
        attn = softmax_rows((q @ k.swap_last()) * (1.0 / math.sqrt(d)))
        out = self.o(self._merge(attn @ v))
        captured = attn.data.mean(axis=-3) if capture else None
        return out, captured


class TransformerBlock(Module):
    """Pre-norm block: ``z' = z + MSA(LN(z))``, ``out = z' + MLP(LN(z'))``."""

    def __init__(self, c: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.norm1 = LayerNorm(c)
        self.attn = MultiHeadAttention(c, heads, rng)
        self.norm2 = LayerNorm(c)
        self.mlp = MLP(c, rng, mlp_ratio)

    def __call__(self, z: Tensor, capture: bool = False):
        a, captured = self.attn(self.norm1(z), capture=capture)
        z = z + a
        z = z + self.mlp(self.norm2(z))
        return z, captured


def self_attention(layer: MultiHeadAttention, z: Tensor, capture: bool = False):
    return layer(z, capture=capture)


def cross_attention(layer: MultiHeadAttention, q_src: Tensor, kv_src: Tensor, capture: bool = False):
    return layer(q_src, context=kv_src, capture=capture)
