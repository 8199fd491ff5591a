"""Non-local upsampling: a 2x decoder upsampler built on cross-attention.

Queries come from the high-resolution skip tokens, keys and values from the
whole low-resolution token set, so every output token can draw on any
low-resolution position.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .nn import Linear, Module, MultiHeadAttention
from .tensor import Tensor
from .windowing import upsample_nearest


class NluLayer(Module):
    def __init__(self, c_skip: int, c_low: int, heads: int, rng: np.random.Generator,
                 residual: bool = True, c_out: int | None = None):
        c = c_out or c_skip
        self.q_embed = Linear(c_skip, c, rng)
        self.kv_embed = Linear(c_low, c, rng)
        self.attn = MultiHeadAttention(c, heads, rng)
        self.out_proj = Linear(c, c, rng)
        self.residual = Linear(c_low, c, rng) if residual else None

    def __call__(self, skip: Tensor, low: Tensor, low_hw: tuple[int, int], capture: bool = False):
        b, n_skip, _ = skip.shape
        n_low = low.shape[1]
        if n_skip != 4 * n_low:
            raise ConfigError(f"skip has {n_skip} tokens, expected 4 x {n_low}")
        if low_hw[0] * low_hw[1] != n_low:
            raise ConfigError(f"low-resolution grid {low_hw} does not hold {n_low} tokens")
        if skip.shape[-1] != self.q_embed.c_in or low.shape[-1] != self.kv_embed.c_in:
            raise ConfigError(f"NLU expects {self.q_embed.c_in}/{self.kv_embed.c_in} channels, "
                              f"got {skip.shape[-1]}/{low.shape[-1]}")
        out, attn = self.attn(self.q_embed(skip), context=self.kv_embed(low), capture=capture)
        out = self.out_proj(out)
        if self.residual is not None:
            out = out + upsample_nearest(self.residual(low), low_hw)
        return out, attn


class PatchExpand(Module):
    """Baseline upsampler: linear channel map, then nearest-neighbour 2x."""

    def __init__(self, c_low: int, c_out: int, rng: np.random.Generator):
        self.proj = Linear(c_low, c_out, rng)

    def __call__(self, skip: Tensor, low: Tensor, low_hw: tuple[int, int], capture: bool = False):
        return upsample_nearest(self.proj(low), low_hw), None


def nlu_upsample(layer: NluLayer, skip: Tensor, low: Tensor, low_hw: tuple[int, int]) -> Tensor:
    return layer(skip, low, low_hw)[0]
