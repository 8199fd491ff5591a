"""U-shaped GLAM segmentation network, loss and segmentation metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .glam import GlamStage
from .nlu import NluLayer, PatchExpand
from .nn import INIT_STD, Linear, Module
from .rng import make_rng
from .tensor import Tensor, cross_entropy
from .windowing import PatchEmbed, PatchMerging


@dataclass
class ModelConfig:
    image_size: tuple[int, int] = (64, 64)
    patch_size: int = 4
    channels: int = 32
    window: int = 4
    stages: tuple[tuple[int, bool], ...] = ((2, True), (2, True))
    n_g: int = 4
    num_classes: int = 5
    gmsa_enabled: bool = True
    nlu_enabled: bool = True
    nlu_residual: bool = True
    decoder_symmetric: bool = True
    global_pos: bool = False
    head_dim: int = 16
    init_std: float = 0.02  # std of linear weights; embeddings and global tokens keep 0.02

    def __post_init__(self):
        if isinstance(self.image_size, int):
            self.image_size = (self.image_size, self.image_size)
        self.image_size = tuple(int(v) for v in self.image_size)
        self.stages = tuple((int(d), bool(g)) for d, g in self.stages)

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    @property
    def token_grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    def stage_grid(self, s: int) -> tuple[int, int]:
        h, w = self.token_grid
        return h >> s, w >> s

    def stage_channels(self, s: int) -> int:
        return self.channels << s

    def stage_heads(self, s: int) -> int:
        return max(1, self.stage_channels(s) // self.head_dim)

    def stage_windows(self, s: int) -> int:
        h, w = self.stage_grid(s)
        return (h // self.window) * (w // self.window)

    def validate(self) -> "ModelConfig":
        h, w = self.image_size
        p = self.patch_size
        if p < 1 or h % p or w % p:
            raise ConfigError(f"image {h}x{w} is not divisible by patch size {p}")
        if not self.stages:
            raise ConfigError("at least one stage is required")
        if not self.init_std > 0:
            raise ConfigError("init_std must be positive")
        if self.n_g < 0 or self.num_classes < 1 or self.channels < 1 or self.window < 1:
            raise ConfigError("n_g must be >= 0; num_classes, channels and window must be positive")
        gh, gw = self.token_grid
        f = (1 << (self.num_stages - 1)) * self.window
        if gh % f or gw % f:
            raise ConfigError(f"token grid {gh}x{gw} must be divisible by 2^(stages-1)*window = {f}")
        for s in range(self.num_stages):
            c = self.stage_channels(s)
            if c % self.stage_heads(s):
                raise ConfigError(f"stage {s}: {c} channels not divisible by {self.stage_heads(s)} heads")
        return self


class SegModel(Module):
    """Encoder of GLAM stages joined by patch merging, decoder of upsamplers
    (NLU or patch expansion) plus optional GLAM stages, and a linear head on
    the finest token grid."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = make_rng(seed)
        self.patch_embed = PatchEmbed(cfg.image_size, cfg.patch_size, cfg.channels, rng)
        self.encoder = []
        self.merges = []
        for s, (depth, use_glam) in enumerate(cfg.stages):
            self.encoder.append(self._stage(s, depth, use_glam, rng))
            if s < cfg.num_stages - 1:
                self.merges.append(PatchMerging(cfg.stage_channels(s), rng))
        self.upsamplers = []
        self.decoder = []
        for s in reversed(range(cfg.num_stages - 1)):
            c, c_low = cfg.stage_channels(s), cfg.stage_channels(s + 1)
            if cfg.nlu_enabled:
                self.upsamplers.append(NluLayer(c, c_low, cfg.stage_heads(s), rng, cfg.nlu_residual))
            else:
                self.upsamplers.append(PatchExpand(c_low, c, rng))
            if cfg.decoder_symmetric:
                depth, use_glam = cfg.stages[s]
                self.decoder.append(self._stage(s, depth, use_glam, rng))
        self.head = Linear(cfg.channels, cfg.num_classes, rng)
        if cfg.init_std != INIT_STD:
            # truncated normal scales linearly, so this equals drawing at init_std
            for mod in self.modules():
                if isinstance(mod, Linear):
                    mod.weight.data *= cfg.init_std / INIT_STD

    def _stage(self, s: int, depth: int, use_glam: bool, rng) -> GlamStage:
        cfg = self.cfg
        return GlamStage(cfg.stage_channels(s), cfg.stage_heads(s), depth, cfg.window, cfg.stage_grid(s),
                         cfg.n_g, rng, use_glam=use_glam, gmsa_enabled=cfg.gmsa_enabled,
                         global_pos=cfg.global_pos, stage=s)

    def __call__(self, image: Tensor, capture: bool = False):
        return self.forward(image, capture)[0]

    def forward(self, image: Tensor, capture: bool = False):
        """Returns (logits (B, T, K), records) where ``records[s]`` lists the
        encoder stage ``s`` block records (None entries unless ``capture``)."""
        cfg = self.cfg
        x = self.patch_embed(image)
        skips, records = [], []
        for s, stage in enumerate(self.encoder):
            x, recs = stage(x, capture=capture)
            records.append(recs)
            if s < cfg.num_stages - 1:
                skips.append(x)
                x = self.merges[s](x, cfg.stage_grid(s))
        for i, s in enumerate(reversed(range(cfg.num_stages - 1))):
            up, _ = self.upsamplers[i](skips[s], x, cfg.stage_grid(s + 1))
            x = up + skips[s]
            if cfg.decoder_symmetric:
                x, _ = self.decoder[i](x)
        return self.head(x), records


def segmentation_loss(logits: Tensor, labels: np.ndarray, ignore_index: int = -1) -> Tensor:
    """Mean per-patch cross-entropy; ``labels`` is (B, T) on the token grid."""
    b, t, k = logits.shape
    return cross_entropy(logits.reshape(b * t, k), np.asarray(labels).reshape(-1), ignore_index)


def downsample_labels(labels: np.ndarray, patch: int, num_classes: int) -> np.ndarray:
    """Majority vote over each p x p block; ties go to the lower class id.

    ``labels`` is (H, W) or (B, H, W); returns (B, H/p * W/p) or (H/p * W/p,).
    """
    lab = np.asarray(labels)
    single = lab.ndim == 2
    if single:
        lab = lab[None]
    b, h, w = lab.shape
    blocks = lab.reshape(b, h // patch, patch, w // patch, patch).transpose(0, 1, 3, 2, 4)
    blocks = blocks.reshape(b, (h // patch) * (w // patch), patch * patch)
    counts = np.stack([(blocks == c).sum(-1) for c in range(num_classes)], axis=-1)
    out = counts.argmax(-1).astype(np.int64)
    return out[0] if single else out


@dataclass
class SegMetrics:
    iou: np.ndarray  # per class, NaN where the class is absent from both
    dice: np.ndarray
    miou: float
    mean_dice: float
    pixel_accuracy: float
    present: np.ndarray = field(repr=False, default=None)


def confusion(pred: np.ndarray, true: np.ndarray, k: int, ignore_index: int = -1) -> np.ndarray:
    pred, true = np.asarray(pred).reshape(-1), np.asarray(true).reshape(-1)
    keep = true != ignore_index
    return np.bincount(true[keep] * k + pred[keep], minlength=k * k).reshape(k, k)


def metrics(pred: np.ndarray, true: np.ndarray, k: int, ignore_index: int = -1) -> SegMetrics:
    cm = confusion(pred, true, k, ignore_index)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    present = (tp + fp + fn) > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(present, tp / (tp + fp + fn), np.nan)
        dice = np.where(present, 2 * tp / (2 * tp + fp + fn), np.nan)
    total = cm.sum()
    return SegMetrics(
        iou=iou,
        dice=dice,
        miou=float(np.nanmean(iou)) if present.any() else float("nan"),
        mean_dice=float(np.nanmean(dice)) if present.any() else float("nan"),
        pixel_accuracy=float(tp.sum() / total) if total else float("nan"),
        present=present,
    )
