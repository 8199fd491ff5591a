"""Adam with decoupled weight decay, polynomial LR decay, and the training loop."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import records
from .data import augment, target_accuracy
from .errors import ContractError, NumericError
from .model import SegModel, downsample_labels, metrics, segmentation_loss
from .rng import make_rng
from .tensor import Tensor, no_grad


@dataclass
class TrainConfig:
    epochs: int = 1
    batch: int = 8
    steps: int = 0  # 0 -> epochs * batches per epoch
    lr0: float = 6e-5
    poly_power: float = 1.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    augment: bool = True


def poly_lr(t: int, total: int, lr0: float, power: float = 1.0) -> float:
    """``lr0 * (1 - t/total) ** power``; zero at and after ``total``."""
    if t >= total:
        return 0.0
    return lr0 * (1.0 - t / total) ** power


class Adam:
    """Adam with bias correction and decoupled weight decay.

    One step at time ``t`` (1-based) does, per parameter ``p``::

        m = b1*m + (1-b1)*g;  v = b2*v + (1-b2)*g^2
        p = p - lr*wd*p - lr * (m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps)
    """

    def __init__(self, params: list[Tensor], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.params = params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, (self.m, self.v), self.t, lr,
                  self.beta1, self.beta2, self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(params, grads, state, t: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8,
              weight_decay=0.01) -> None:
    """In-place Adam update of numpy arrays ``params`` with moments ``state = (m, v)``."""
    m_list, v_list = state
    if not (len(params) == len(grads) == len(m_list) == len(v_list)):
        raise ContractError("parameter, gradient and state lists differ in length")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, m_list, v_list):
        if p.shape != m.shape or p.shape != g.shape:
            raise ContractError(f"state shape {m.shape} does not match parameter {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            p -= (lr * weight_decay) * p
        p -= lr * update


# -- training --------------------------------------------------------------


def batches_per_epoch(n: int, batch: int) -> int:
    return math.ceil(n / batch)


def total_steps(cfg: TrainConfig, n: int) -> int:
    return cfg.steps if cfg.steps > 0 else cfg.epochs * batches_per_epoch(n, cfg.batch)


def _to_tokens(model: SegModel, labels: np.ndarray) -> np.ndarray:
    c = model.cfg
    return downsample_labels(labels, c.patch_size, c.num_classes)


def train(model: SegModel, samples, cfg: TrainConfig, out_dir: str | Path | None = None,
          progress=None) -> list[dict]:
    """Train in place; returns the per-epoch log and, with ``out_dir``, writes
    ``log.csv`` and ``model.ckpt`` there.

    An epoch is one pass over a fresh permutation of ``samples``; when
    ``cfg.steps`` is set training stops after that many steps, and the last
    partial epoch is logged too.
    """
    n = len(samples)
    total = total_steps(cfg, n)
    rng = make_rng(cfg.seed, 1)
    opt = Adam(model.parameters(), cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    dtype = model.parameters()[0].dtype
    k = model.cfg.num_classes
    log: list[dict] = []
    step = 0
    while step < total:
        order = rng.permutation(n)
        losses, preds, trues = [], [], []
        lr = 0.0
        for lo in range(0, n, cfg.batch):
            if step >= total:
                break
            idx = order[lo:lo + cfg.batch]
            imgs, labs = [], []
            for i in idx:
                img, lab = samples[i]
                if cfg.augment:
                    img, lab = augment(img, lab, rng)
                imgs.append(img)
                labs.append(lab)
            x = Tensor(np.stack(imgs), dtype=dtype)
            y = _to_tokens(model, np.stack(labs))
            lr = poly_lr(step, total, cfg.lr0, cfg.poly_power)
            try:
                logits = model(x)
                loss = segmentation_loss(logits, y)
            except NumericError as exc:
                raise NumericError(f"{exc} at step {step}") from None
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            losses.append(value)
            preds.append(logits.data.argmax(-1))
            trues.append(y)
            step += 1
            if progress:
                progress(step, total, value)
        met = metrics(np.concatenate(preds), np.concatenate(trues), k)
        log.append({"step": step, "lr": lr, "loss": float(np.mean(losses)), "miou": met.miou})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_log(out / "log.csv", log)
        save_checkpoint(model, out / "model.ckpt")
    return log


def write_log(path: str | Path, log: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "lr", "loss", "miou"])
    for row in log:
        w.writerow([row["step"], f"{row['lr']:.10g}", f"{row['loss']:.10g}", f"{row['miou']:.10g}"])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def save_checkpoint(model: SegModel, path: str | Path) -> None:
    records.save(path, {name: p.data for name, p in model.named_parameters()})


def load_checkpoint(model: SegModel, path: str | Path) -> None:
    """Load weights, validating every name and shape against the model."""
    saved = records.load(path)
    own = dict(model.named_parameters())
    missing = sorted(set(own) - set(saved))
    extra = sorted(set(saved) - set(own))
    if missing or extra:
        raise ContractError(f"checkpoint does not match config: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, p in own.items():
        if saved[name].shape != p.shape:
            raise ContractError(f"checkpoint tensor {name!r} has shape {saved[name].shape}, config needs {p.shape}")
        p.data = saved[name].astype(p.dtype)


def predict(model: SegModel, images: np.ndarray, batch: int = 32) -> np.ndarray:
    """Per-token argmax labels, (N, T)."""
    dtype = model.parameters()[0].dtype
    out = []
    with no_grad():
        for lo in range(0, len(images), batch):
            out.append(model(Tensor(images[lo:lo + batch], dtype=dtype)).data.argmax(-1))
    return np.concatenate(out)


def evaluate(model: SegModel, samples, batch: int = 32) -> dict:
    images = np.stack([s[0] for s in samples])
    labels = _to_tokens(model, np.stack([s[1] for s in samples]))
    pred = predict(model, images, batch)
    met = metrics(pred, labels, model.cfg.num_classes)
    return {
        "miou": met.miou,
        "mean_dice": met.mean_dice,
        "pixel_accuracy": met.pixel_accuracy,
        "target_accuracy": target_accuracy(pred, labels),
        "iou": met.iou,
        "dice": met.dice,
    }
