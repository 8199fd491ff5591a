"""Global tokens and the GLAM transformer block.

A GLAM block runs two attention steps on a windowed feature map:

1. W-MSA: each window's sequence ``[g_k ; w_k]`` (N_g global tokens followed by
   N_p visual tokens) goes through a transformer block, windows batched.
2. G-MSA: the N_r*N_g updated global tokens of all windows are flattened into
   one sequence and go through a second transformer block.

The block output re-joins the G-MSA globals with the W-MSA visual tokens.
Visual tokens never attend across windows inside one block; information
crosses windows only through the global tokens.

The ``bare`` mode strips the block down to single-head attention with identity
value/output maps and no LN, MLP or residual. In that mode the global-token
update is exactly ``g_r = sum_n B_rn (A_n,gg g_n + A_n,gw w_n)``, which
:func:`bare_global_embedding` and :func:`induced_attention` evaluate from a
captured :class:`AttentionRecord`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .nn import Module, TransformerBlock, param
from .rng import make_rng, trunc_normal
from .tensor import Tensor, concat, softmax_rows
from .windowing import WindowedFeatureMap, window_merge, window_partition


@dataclass
class AttentionRecord:
    """Attention matrices captured from one GLAM block.

    ``A`` has shape (B, N_r, L, L) with L = N_g + N_p; ``B_mat`` has shape
    (B, N_r*N_g, N_r*N_g) or is None when the G-MSA step did not run.
    Outside bare mode both are head-averaged.
    """

    A: np.ndarray
    B_mat: np.ndarray | None
    n_g: int
    bare: bool = False
    head_averaged: bool = True

    @property
    def num_windows(self) -> int:
        return self.A.shape[1]

    @property
    def patches_per_window(self) -> int:
        return self.A.shape[2] - self.n_g

    def A_gg(self, batch: int = 0) -> np.ndarray:
        return self.A[batch, :, : self.n_g, : self.n_g]

    def A_gw(self, batch: int = 0) -> np.ndarray:
        return self.A[batch, :, : self.n_g, self.n_g:]

    def A_wg(self, batch: int = 0) -> np.ndarray:
        return self.A[batch, :, self.n_g:, : self.n_g]

    def A_ww(self, batch: int = 0) -> np.ndarray:
        return self.A[batch, :, self.n_g:, self.n_g:]

    def B_block(self, i: int, j: int, batch: int = 0) -> np.ndarray:
        """Attention from the globals of window ``i`` to those of window ``j``."""
        if self.B_mat is None:
            raise ContractError("record has no global attention matrix (G-MSA disabled)")
        g = self.n_g
        return self.B_mat[batch, i * g:(i + 1) * g, j * g:(j + 1) * g]


@dataclass
class InducedAttention:
    patch_weights: np.ndarray  # (N_r, N_p): weight on visual token i of window r'
    global_mass: float  # total weight routed through previous global tokens
    token: int
    window: int
    per_window_global: np.ndarray = field(default=None)  # (N_r,)

    @property
    def total(self) -> float:
        return float(self.patch_weights.sum() + self.global_mass)


class GlobalTokenBank(Module):
    """Learned initial global tokens for one resolution stage."""

    def __init__(self, n_g: int, c: int, rng: np.random.Generator, num_windows: int | None = None):
        self.n_g = n_g
        self.tokens = param(trunc_normal(rng, (n_g, c)))
        # optional learned per-window offset; off by default
        self.window_pos = param(trunc_normal(rng, (num_windows, 1, c))) if num_windows else None

    def working(self, batch: int, num_windows: int) -> Tensor:
        """Per-window copies g_k^0, shape (B, N_r, N_g, C)."""
        c = self.tokens.shape[1]
        g = self.tokens.reshape(1, 1, self.n_g, c).broadcast_to((batch, num_windows, self.n_g, c))
        if self.window_pos is not None:
            g = g + self.window_pos
        return g


def concat_globals(wfm: WindowedFeatureMap, bank: GlobalTokenBank | Tensor | None) -> Tensor:
    """``z_k = [g_k ; w_k]`` for every window; globals occupy slots 0..N_g-1."""
    w = wfm.tokens
    if bank is None:
        return w
    b, nr, _, c = w.shape
    g = bank.working(b, nr) if isinstance(bank, GlobalTokenBank) else bank
    if g.shape[-1] != c:
        raise ConfigError(f"global tokens have {g.shape[-1]} channels, visual tokens {c}")
    if g.shape[-2] == 0:
        return w
    return concat([g, w], axis=2)


def split_globals(z: Tensor, n_g: int) -> tuple[Tensor, Tensor]:
    return z[:, :, :n_g, :], z[:, :, n_g:, :]


class GlamBlock(Module):
    """One W-MSA step followed by one G-MSA step over (B, N_r, N_g+N_p, C)."""

    def __init__(self, c: int, heads: int, n_g: int, rng: np.random.Generator,
                 gmsa_enabled: bool = True, bare: bool = False):
        self.n_g = n_g
        self.gmsa_enabled = gmsa_enabled
        self.bare = bare
        if bare:
            self.wq = param(rng.standard_normal((c, c)))
            self.wk = param(rng.standard_normal((c, c)))
            self.gq = param(rng.standard_normal((c, c)))
            self.gk = param(rng.standard_normal((c, c)))
        else:
            self.w_block = TransformerBlock(c, heads, rng)
            self.g_block = TransformerBlock(c, heads, rng) if gmsa_enabled and n_g > 0 else None

    @property
    def runs_gmsa(self) -> bool:
        return self.gmsa_enabled and self.n_g > 0

    def __call__(self, z: Tensor, capture: bool = False, freeze_attention: bool = False):
        if self.bare:
            return self._bare(z, capture, freeze_attention)
        b, nr, length, c = z.shape
        zhat, a = self.w_block(z, capture=capture)
        bmat = None
        if self.runs_gmsa:
            ghat, what = split_globals(zhat, self.n_g)
            g, bmat = self.g_block(ghat.reshape(b, nr * self.n_g, c), capture=capture)
            zhat = concat([g.reshape(b, nr, self.n_g, c), what], axis=2)
        record = AttentionRecord(a, bmat, self.n_g) if capture else None
        return zhat, record

    def _bare(self, z: Tensor, capture: bool, freeze: bool):
        b, nr, length, c = z.shape
        scale = 1.0 / math.sqrt(c)
        a = softmax_rows(((z @ self.wq) @ (z @ self.wk).swap_last()) * scale)
        if freeze:
            a = a.detach()
        zhat = a @ z
        bmat = None
        if self.runs_gmsa:
            ghat, what = split_globals(zhat, self.n_g)
            flat = ghat.reshape(b, nr * self.n_g, c)
            bm = softmax_rows(((flat @ self.gq) @ (flat @ self.gk).swap_last()) * scale)
            if freeze:
                bm = bm.detach()
            g = bm @ flat
            zhat = concat([g.reshape(b, nr, self.n_g, c), what], axis=2)
            bmat = bm.data.copy()
        record = AttentionRecord(a.data.copy(), bmat, self.n_g, bare=True, head_averaged=False) if capture else None
        return zhat, record


def glam_block(block: GlamBlock, z: Tensor, capture: bool = False):
    return block(z, capture=capture)


def bare_global_embedding(record: AttentionRecord, g_prev: np.ndarray, w_prev: np.ndarray,
                          batch: int = 0) -> np.ndarray:
    """Global tokens after one bare block, by explicit block-matrix composition.

    ``g_prev`` is (N_r, N_g, C) and ``w_prev`` is (N_r, N_p, C), the block
    inputs for one batch element. Returns (N_r, N_g, C).
    """
    if not record.bare:
        raise ContractError("bare_global_embedding needs a record captured in bare mode")
    if record.B_mat is None:
        raise ContractError("bare record has no G-MSA matrix")
    nr = record.num_windows
    a_gg, a_gw = record.A_gg(batch), record.A_gw(batch)
    ghat = [a_gg[n] @ g_prev[n] + a_gw[n] @ w_prev[n] for n in range(nr)]
    out = np.zeros_like(np.asarray(g_prev, dtype=record.A.dtype))
    for r in range(nr):
        for n in range(nr):
            out[r] += record.B_block(r, n, batch) @ ghat[n]
    return out


def induced_attention(record: AttentionRecord, k: int, r: int, batch: int = 0) -> InducedAttention:
    """Effective attention of global token ``k`` of window ``r`` over all patches.

    The weight on visual token ``i`` of window ``r'`` is
    ``sum_j b[(r,k),(r',j)] * a[r', j, N_g + i]``; the weight routed through
    the previous global tokens is returned separately as ``global_mass``.
    Without a G-MSA matrix (ablation mode) ``b`` is the identity, so the
    token only covers its own window.
    """
    n_g, nr = record.n_g, record.num_windows
    if not 0 <= k < n_g:
        raise IndexError(f"global token index {k} out of range [0, {n_g})")
    if not 0 <= r < nr:
        raise IndexError(f"window index {r} out of range [0, {nr})")
    if record.B_mat is None:
        brow = np.zeros((nr, n_g))
        brow[r, k] = 1.0
    else:
        brow = record.B_mat[batch, r * n_g + k].reshape(nr, n_g)  # b[(r,k),(r',j)]
    patch = np.einsum("rj,rji->ri", brow, record.A_gw(batch))
    per_window = np.einsum("rj,rj->r", brow, record.A_gg(batch).sum(axis=-1))
    return InducedAttention(patch, float(per_window.sum()), k, r, per_window)


class GlamStage(Module):
    """A chain of GLAM blocks over one resolution level.

    With ``n_g == 0`` (or ``use_glam`` off) the stage is plain windowed
    attention. Global tokens start from the stage's own bank and are dropped
    when the stage ends.
    """

    def __init__(self, c: int, heads: int, depth: int, window: int, hw: tuple[int, int], n_g: int,
                 rng: np.random.Generator, use_glam: bool = True, gmsa_enabled: bool = True,
                 global_pos: bool = False, stage: int = 0):
        self.hw = hw
        self.window = window
        self.stage = stage
        self.n_g = n_g if use_glam else 0
        num_windows = (hw[0] // window) * (hw[1] // window)
        self.bank = (GlobalTokenBank(self.n_g, c, rng, num_windows if global_pos else None)
                     if self.n_g > 0 else None)
        self.blocks = [GlamBlock(c, heads, self.n_g, rng, gmsa_enabled) for _ in range(depth)]

    def __call__(self, tokens: Tensor, capture: bool = False):
        wfm = window_partition(tokens, self.window, self.hw, self.stage)
        z = concat_globals(wfm, self.bank)
        records = []
        for blk in self.blocks:
            z, rec = blk(z, capture=capture)
            records.append(rec)
        _, w = split_globals(z, self.n_g)
        wfm.tokens = w
        return window_merge(wfm), records


def bare_check(nr: int, ng: int, np_: int, c: int, seed: int) -> tuple[float, float]:
    """Random bare instance: returns (max |composition - forward|, max |induced
    patch mass + global mass - 1| over every (k, r)). Run in checking precision."""
    rs = make_rng(seed, 1)
    blk = GlamBlock(c, 1, ng, make_rng(seed), bare=True)
    g = rs.standard_normal((nr, ng, c))
    w = rs.standard_normal((nr, np_, c))
    out, rec = blk(Tensor(np.concatenate([g, w], axis=1)[None]), capture=True)
    comp = float(np.abs(bare_global_embedding(rec, g, w) - out.data[0, :, :ng]).max())
    mass = max(abs(induced_attention(rec, k, r).total - 1.0) for r in range(nr) for k in range(ng))
    return comp, float(mass)
