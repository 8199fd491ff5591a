"""Closed-form parameter and FLOP accounting, and attention-map export.

FLOP convention: a multiply-add is 2 FLOPs, so a (m, k) x (k, n) product costs
``2*m*k*n``. Softmax is charged 5 FLOPs per element and layer norm 8 per
element. Bias additions, residual sums, GELU and the attention scaling are
not counted. The same convention is applied by the instrumented counter in
:mod:`glamseg.tensor`, so the two must agree exactly.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .glam import AttentionRecord, induced_attention
from .model import ModelConfig, SegModel
from .tensor import LAYERNORM_FLOPS_PER_ELEMENT as LN_K
from .tensor import SOFTMAX_FLOPS_PER_ELEMENT as SM_K
from .tensor import Tensor, no_grad

# -- parameter formulas ----------------------------------------------------


def linear_params(c_in: int, c_out: int, bias: bool = True) -> int:
    return c_in * c_out + (c_out if bias else 0)


def msa_params(c: int) -> int:
    # q, v, o with bias; k without
    return 3 * linear_params(c, c) + linear_params(c, c, bias=False)


def block_params(c: int, mlp_ratio: int = 4) -> int:
    mlp = linear_params(c, mlp_ratio * c) + linear_params(mlp_ratio * c, c)
    return 2 * (2 * c) + msa_params(c) + mlp


def stage_params(cfg: ModelConfig, s: int, depth: int, use_glam: bool) -> int:
    c = cfg.stage_channels(s)
    n_g = cfg.n_g if use_glam else 0
    total = depth * block_params(c)
    if n_g > 0:
        total += n_g * c
        if cfg.global_pos:
            total += cfg.stage_windows(s) * c
        if cfg.gmsa_enabled:
            total += depth * block_params(c)
    return total


def nlu_params(c: int, c_low: int, residual: bool) -> int:
    total = linear_params(c, c) + linear_params(c_low, c) + msa_params(c) + linear_params(c, c)
    return total + (linear_params(c_low, c) if residual else 0)


# -- FLOP formulas ---------------------------------------------------------


def matmul_flops(m: int, k: int, n: int) -> int:
    return 2 * m * k * n


def attention_core_flops(n_q: int, n_kv: int, c: int, heads: int) -> int:
    """Scores, softmax and the value product for all heads."""
    return 2 * matmul_flops(n_q, c, n_kv) + SM_K * heads * n_q * n_kv


def msa_flops(n_q: int, n_kv: int, c: int, heads: int) -> int:
    proj = 2 * matmul_flops(n_q, c, c) + 2 * matmul_flops(n_kv, c, c)
    return proj + attention_core_flops(n_q, n_kv, c, heads)


def block_flops(n: int, c: int, heads: int, mlp_ratio: int = 4) -> int:
    ln = 2 * LN_K * n * c
    mlp = 2 * matmul_flops(n, c, mlp_ratio * c)
    return ln + msa_flops(n, n, c, heads) + mlp


def stage_flops(cfg: ModelConfig, s: int, depth: int, use_glam: bool) -> int:
    c, heads = cfg.stage_channels(s), cfg.stage_heads(s)
    n_r, n_p = cfg.stage_windows(s), cfg.window * cfg.window
    n_g = cfg.n_g if use_glam else 0
    per_block = n_r * block_flops(n_g + n_p, c, heads)
    if n_g > 0 and cfg.gmsa_enabled:
        per_block += block_flops(n_r * n_g, c, heads)
    return depth * per_block


def full_attention_stage_flops(cfg: ModelConfig, s: int, depth: int) -> int:
    """Cost of the same stage with one attention over all tokens and no globals."""
    h, w = cfg.stage_grid(s)
    return depth * block_flops(h * w, cfg.stage_channels(s), cfg.stage_heads(s))


@dataclass
class CostReport:
    params: dict[str, int] = field(default_factory=dict)
    flops: dict[str, int] = field(default_factory=dict)
    stage_of: dict[str, int] = field(default_factory=dict)
    full_attention_flops: int | None = None

    @property
    def total_params(self) -> int:
        return sum(self.params.values())

    @property
    def total_flops(self) -> int:
        return sum(self.flops.values())

    def by_stage(self, which: str = "params") -> dict[int, int]:
        src = self.params if which == "params" else self.flops
        out: dict[int, int] = {}
        for name, v in src.items():
            out[self.stage_of[name]] = out.get(self.stage_of[name], 0) + v
        return dict(sorted(out.items()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["module", "stage", "params", "flops"])
        for name in self.stage_of:
            w.writerow([name, self.stage_of[name], self.params.get(name, ""), self.flops.get(name, "")])
        w.writerow(["total", "", self.total_params if self.params else "", self.total_flops if self.flops else ""])
        if self.full_attention_flops is not None:
            w.writerow(["full_attention_equivalent", "", "", self.full_attention_flops])
        return buf.getvalue()


def _modules(cfg: ModelConfig):
    """(name, stage, params, flops) for every top-level module, in build order."""
    cfg.validate()
    p = cfg.patch_size
    t0 = cfg.token_grid[0] * cfg.token_grid[1]
    s_last = cfg.num_stages - 1
    rows = [("patch_embed", 0, linear_params(3 * p * p, cfg.channels) + t0 * cfg.channels,
             matmul_flops(t0, 3 * p * p, cfg.channels))]
    for s, (depth, use_glam) in enumerate(cfg.stages):
        rows.append((f"encoder.{s}", s, stage_params(cfg, s, depth, use_glam),
                     stage_flops(cfg, s, depth, use_glam)))
    for s in range(s_last):
        c = cfg.stage_channels(s)
        h, w = cfg.stage_grid(s)
        rows.append((f"merges.{s}", s, linear_params(4 * c, 2 * c), matmul_flops(h * w // 4, 4 * c, 2 * c)))
    ups, dec = [], []
    for i, s in enumerate(reversed(range(s_last))):
        c, c_low = cfg.stage_channels(s), cfg.stage_channels(s + 1)
        h, w = cfg.stage_grid(s)
        n_hi, n_lo = h * w, h * w // 4
        if cfg.nlu_enabled:
            fl = (matmul_flops(n_hi, c, c) + matmul_flops(n_lo, c_low, c)
                  + msa_flops(n_hi, n_lo, c, cfg.stage_heads(s)) + matmul_flops(n_hi, c, c))
            if cfg.nlu_residual:
                fl += matmul_flops(n_lo, c_low, c)
            ups.append((f"upsamplers.{i}", s, nlu_params(c, c_low, cfg.nlu_residual), fl))
        else:
            ups.append((f"upsamplers.{i}", s, linear_params(c_low, c), matmul_flops(n_lo, c_low, c)))
        if cfg.decoder_symmetric:
            depth, use_glam = cfg.stages[s]
            dec.append((f"decoder.{i}", s, stage_params(cfg, s, depth, use_glam),
                        stage_flops(cfg, s, depth, use_glam)))
    rows += ups + dec
    rows.append(("head", 0, linear_params(cfg.channels, cfg.num_classes),
                 matmul_flops(t0, cfg.channels, cfg.num_classes)))
    return rows


def count_params(cfg: ModelConfig) -> CostReport:
    rows = _modules(cfg)
    return CostReport(params={n: pa for n, _, pa, _ in rows}, stage_of={n: s for n, s, _, _ in rows})


def count_flops(cfg: ModelConfig) -> CostReport:
    """Forward FLOPs for a single image, plus the cost the same network would
    have with full (unwindowed, global-token-free) attention in every stage."""
    rows = _modules(cfg)
    report = CostReport(flops={n: f for n, _, _, f in rows}, stage_of={n: s for n, s, _, _ in rows})
    full = report.total_flops
    for name, s, _, f in rows:
        if name.startswith(("encoder.", "decoder.")):
            depth = cfg.stages[s][0]
            full += full_attention_stage_flops(cfg, s, depth) - f
    report.full_attention_flops = full
    return report


def cost_report(cfg: ModelConfig) -> CostReport:
    p, f = count_params(cfg), count_flops(cfg)
    f.params = p.params
    return f


def live_param_count(model: SegModel) -> dict[str, int]:
    """Parameter sizes of an instantiated model grouped like :func:`count_params`."""
    out: dict[str, int] = {}
    for name, p in model.named_parameters():
        head, _, rest = name.partition(".")
        key = head
        if head in ("encoder", "merges", "upsamplers", "decoder"):
            key = f"{head}.{rest.partition('.')[0]}"
        out[key] = out.get(key, 0) + p.size
    return out


def overhead_table(configs: dict[str, ModelConfig], baseline: str) -> str:
    """CSV of params/FLOPs per config with the relative increase over ``baseline``."""
    base = cost_report(configs[baseline])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "params", "flops", "extra_params_pct", "extra_flops_pct"])
    for name, cfg in configs.items():
        rep = cost_report(cfg)
        w.writerow([name, rep.total_params, rep.total_flops,
                    f"{100.0 * (rep.total_params / base.total_params - 1):.4f}",
                    f"{100.0 * (rep.total_flops / base.total_flops - 1):.4f}"])
    return buf.getvalue()


# -- attention export ------------------------------------------------------


@dataclass
class AttentionMap:
    grid: np.ndarray  # (H_s, W_s) weight per patch position
    rows: list[tuple[int, int, int, int, float]]  # win_index, patch_index, row, col, weight
    global_mass: float
    meta: dict


def _place(weights: np.ndarray, grid_hw: tuple[int, int], window: int):
    """Scatter (N_r, N_p) window-ordered weights onto the spatial grid."""
    gw = grid_hw[1] // window
    grid = np.zeros(grid_hw)
    rows = []
    for r in range(weights.shape[0]):
        wr, wc = divmod(r, gw)
        for i in range(weights.shape[1]):
            pr, pc = divmod(i, window)
            y, x = wr * window + pr, wc * window + pc
            grid[y, x] = weights[r, i]
            rows.append((r, i, y, x, float(weights[r, i])))
    return grid, rows


def attention_map(record: AttentionRecord, grid_hw: tuple[int, int], window: int,
                  token: tuple[int, int] | None = None, patch: tuple[int, int] | None = None,
                  batch: int = 0) -> AttentionMap:
    """Spatial attention of global token ``token=(k, r)`` (induced, through
    the G-MSA composition) or of visual token ``patch=(i, r)`` (its own
    W-MSA row, zero outside window ``r``)."""
    if (token is None) == (patch is None):
        raise ValueError("give exactly one of token=(k, r) or patch=(i, r)")
    n_r, n_p = record.num_windows, record.patches_per_window
    if token is not None:
        k, r = token
        ind = induced_attention(record, k, r, batch)
        weights, gmass = ind.patch_weights, ind.global_mass
        query = f"global token k={k} window r={r}"
    else:
        i, r = patch
        if not 0 <= i < n_p:
            raise IndexError(f"patch index {i} out of range [0, {n_p})")
        if not 0 <= r < n_r:
            raise IndexError(f"window index {r} out of range [0, {n_r})")
        row = record.A[batch, r, record.n_g + i]
        weights = np.zeros((n_r, n_p))
        weights[r] = row[record.n_g:]
        gmass = float(row[: record.n_g].sum())
        query = f"visual token i={i} window r={r}"
    grid, rows = _place(weights, grid_hw, window)
    meta = {
        "query": query,
        "head_averaged": str(record.head_averaged).lower(),
        "bare_mode": str(record.bare).lower(),
        "global_mass": f"{gmass:.10g}",
        "patch_mass": f"{weights.sum():.10g}",
        "min": f"{grid.min():.10g}",
        "max": f"{grid.max():.10g}",
        "normalization": "min-max to 0..255",
        "grid": f"{grid_hw[0]}x{grid_hw[1]}",
        "window": str(window),
    }
    return AttentionMap(grid, rows, gmass, meta)


def to_pgm(grid: np.ndarray) -> bytes:
    lo, hi = float(grid.min()), float(grid.max())
    if hi > lo:
        px = np.rint(255.0 * (grid - lo) / (hi - lo))
    else:
        px = np.zeros_like(grid)
    h, w = grid.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + px.astype(np.uint8).tobytes()


def write_attention(amap: AttentionMap, prefix: str | Path) -> dict[str, Path]:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = {"csv": prefix.with_suffix(".csv"), "pgm": prefix.with_suffix(".pgm"),
             "meta": prefix.with_suffix(".meta.txt")}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["win_index", "patch_index", "row", "col", "weight"])
    for r, i, y, x, v in amap.rows:
        w.writerow([r, i, y, x, f"{v:.10g}"])
    paths["csv"].write_text(buf.getvalue(), encoding="utf-8")
    paths["pgm"].write_bytes(to_pgm(amap.grid))
    paths["meta"].write_text("".join(f"{k}: {v}\n" for k, v in amap.meta.items()), encoding="utf-8")
    return paths


def export_attention(model: SegModel, image: np.ndarray, stage: int, prefix: str | Path,
                     token: tuple[int, int] | None = None, patch: tuple[int, int] | None = None,
                     block: int = -1) -> AttentionMap:
    """Capture-enabled forward of one image, then export the attention of the
    requested query from encoder ``stage`` (last block by default)."""
    cfg = model.cfg
    if not 0 <= stage < cfg.num_stages:
        raise IndexError(f"stage {stage} out of range [0, {cfg.num_stages})")
    dtype = model.parameters()[0].dtype
    with no_grad():
        _, records = model.forward(Tensor(np.asarray(image)[None], dtype=dtype), capture=True)
    stage_records = records[stage]
    if not stage_records:
        raise IndexError(f"stage {stage} has no blocks")
    record = stage_records[block]
    amap = attention_map(record, cfg.stage_grid(stage), cfg.window, token=token, patch=patch)
    amap.meta = {"stage": str(stage), "block": str(block % len(stage_records)), **amap.meta}
    write_attention(amap, prefix)
    return amap
