"""Patch embedding, window partition/merge and patch merging.

Token maps are stored as (B, H*W, C) in row-major spatial order. A window
partition of side ``M`` gives (B, N_r, N_p, C) where windows are ordered
row-major over the window grid and patches row-major inside each window.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .nn import Linear, Module, param
from .rng import trunc_normal
from .tensor import Tensor


@dataclass
class WindowedFeatureMap:
    tokens: Tensor  # (B, N_r, N_p, C)
    grid: tuple[int, int]  # window grid (H_w, W_w)
    window: int  # M
    stage: int = 0

    @property
    def num_windows(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def patches_per_window(self) -> int:
        return self.window * self.window

    @property
    def spatial(self) -> tuple[int, int]:
        return self.grid[0] * self.window, self.grid[1] * self.window

    def patch_position(self, r: int, i: int) -> tuple[int, int]:
        """(row, col) on the token grid of patch ``i`` in window ``r``."""
        wr, wc = divmod(r, self.grid[1])
        pr, pc = divmod(i, self.window)
        return wr * self.window + pr, wc * self.window + pc


def _square_side(n: int) -> int:
    s = math.isqrt(n)
    if s * s != n:
        raise ConfigError(f"{n} tokens do not form a square map; pass hw explicitly")
    return s


def window_partition(tokens: Tensor, window: int, hw: tuple[int, int] | None = None,
                     stage: int = 0) -> WindowedFeatureMap:
    b, n, c = tokens.shape
    h, w = hw if hw is not None else (_square_side(n),) * 2
    if h * w != n:
        raise ConfigError(f"grid {h}x{w} does not hold {n} tokens")
    if h % window or w % window:
        raise ConfigError(f"feature map {h}x{w} is not divisible by window side {window}")
    gh, gw = h // window, w // window
    x = tokens.reshape(b, gh, window, gw, window, c).transpose(0, 1, 3, 2, 4, 5)
    return WindowedFeatureMap(x.reshape(b, gh * gw, window * window, c), (gh, gw), window, stage)


def window_merge(wfm: WindowedFeatureMap) -> Tensor:
    b, nr, npch, c = wfm.tokens.shape
    gh, gw = wfm.grid
    m = wfm.window
    if gh * gw != nr or m * m != npch:
        raise ContractError(f"window grid {wfm.grid} / side {m} inconsistent with tokens {wfm.tokens.shape}")
    x = wfm.tokens.reshape(b, gh, gw, m, m, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * m * gw * m, c)


def space_to_depth(x: Tensor, hw: tuple[int, int], f: int) -> Tensor:
    """(B, H*W, C) -> (B, H/f*W/f, f*f*C); each f x f block flattened row-major."""
    b, _, c = x.shape
    h, w = hw
    x = x.reshape(b, h // f, f, w // f, f, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // f) * (w // f), f * f * c)


def upsample_nearest(x: Tensor, hw: tuple[int, int], f: int = 2) -> Tensor:
    """(B, h*w, C) -> (B, f*h*f*w, C) by repeating each token in an f x f block."""
    b, _, c = x.shape
    h, w = hw
    x = x.reshape(b, h, 1, w, 1, c).broadcast_to((b, h, f, w, f, c))
    return x.reshape(b, h * f * w * f, c)


class PatchEmbed(Module):
    """Non-overlapping p x p patches, linear projection, learned absolute positions."""

    def __init__(self, image_hw: tuple[int, int], patch: int, channels: int, rng: np.random.Generator):
        h, w = image_hw
        if h % patch or w % patch:
            raise ConfigError(f"image {h}x{w} not divisible by patch size {patch}; "
                              f"valid sizes are multiples of {patch}")
        self.patch = patch
        self.image_hw = (h, w)
        self.proj = Linear(patch * patch * 3, channels, rng)
        self.pos = param(trunc_normal(rng, ((h // patch) * (w // patch), channels)))

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_hw[0] // self.patch, self.image_hw[1] // self.patch

    def __call__(self, image: Tensor) -> Tensor:
        b, h, w, ch = image.shape
        if (h, w) != self.image_hw or ch != 3:
            raise ConfigError(f"expected images of shape (*, {self.image_hw[0]}, {self.image_hw[1]}, 3), "
                              f"got {image.shape}; valid sizes are multiples of {self.patch}")
        patches = space_to_depth(image.reshape(b, h * w, 3), (h, w), self.patch)
        return self.proj(patches) + self.pos


def patch_embed(layer: PatchEmbed, image: Tensor) -> Tensor:
    return layer(image)


class PatchMerging(Module):
    """2x2 neighbour concatenation (4C) then a linear map to 2C."""

    def __init__(self, c: int, rng: np.random.Generator):
        self.reduction = Linear(4 * c, 2 * c, rng)

    def __call__(self, tokens: Tensor, hw: tuple[int, int]) -> Tensor:
        h, w = hw
        if h % 2 or w % 2:
            raise ConfigError(f"patch merging needs even sides, got {h}x{w}")
        return self.reduction(space_to_depth(tokens, hw, 2))


def patch_merging(layer: PatchMerging, tokens: Tensor, hw: tuple[int, int]) -> Tensor:
    return layer(tokens, hw)
