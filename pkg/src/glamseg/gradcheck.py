"""Central finite-difference gradient checks against the autodiff tape."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

STEP = 1e-5
FLOOR = 1e-8


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    samples: int
    worst: tuple | None = None

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / (abs(numeric) + FLOOR)


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[tuple[str, Tensor]],
                    rng: np.random.Generator, samples_per_tensor: int = 4, h: float = STEP,
                    name: str = "") -> GradCheckResult:
    """Compare ``backward()`` gradients with central differences at randomly
    sampled coordinates of every tensor in ``tensors``.

    ``loss_fn`` must rebuild the graph from the current tensor values and
    return a scalar. Tensors must hold float64 data for the tolerance to mean
    anything.
    """
    tensors = list(tensors)
    for _, t in tensors:
        t.grad = None
    loss_fn().backward()
    grads = {id(t): (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for _, t in tensors}
    worst, where, count = 0.0, None, 0
    for tname, t in tensors:
        flat = t.data.reshape(-1)
        k = min(samples_per_tensor, flat.size)
        for j in rng.choice(flat.size, size=k, replace=False):
            orig = flat[j]
            flat[j] = orig + h
            up = loss_fn().item()
            flat[j] = orig - h
            down = loss_fn().item()
            flat[j] = orig
            numeric = (up - down) / (2 * h)
            analytic = float(grads[id(t)].reshape(-1)[j])
            err = rel_error(analytic, numeric)
            count += 1
            if err > worst or where is None:
                worst, where = max(err, worst), (tname, int(j), analytic, numeric)
    return GradCheckResult(name, worst, count, where)


def _randomize(module, rs: np.random.Generator, std: float = 0.5) -> None:
    # init-scale weights give gradients small enough for roundoff to dominate
    # the finite differences; O(1) weights make the check meaningful
    for p in module.parameters():
        p.data[...] = rs.standard_normal(p.shape) * std


def gradient_suite(seed: int = 0, samples: int = 4) -> list[GradCheckResult]:
    """Finite-difference check of every parameterised layer type plus the loss
    of a small two-stage model. Call under ``precision("checking")``."""
    from .glam import GlamBlock, GlobalTokenBank, concat_globals
    from .model import ModelConfig, SegModel, segmentation_loss
    from .nlu import NluLayer
    from .nn import LayerNorm, Linear, MultiHeadAttention
    from .rng import make_rng
    from .windowing import window_partition

    rs = make_rng(seed, 99)
    out = []

    def run(name, loss_fn, tensors):
        out.append(check_gradients(loss_fn, tensors, rs, samples, name=name))

    def inp(*shape):
        return Tensor(rs.standard_normal(shape), requires_grad=True)

    def probe(*shape):
        return Tensor(rs.standard_normal(shape))

    lin = Linear(6, 5, make_rng(seed, 1))
    _randomize(lin, rs)
    x, w = inp(3, 6), probe(3, 5)
    run("linear", lambda: (lin(x) * w).sum(), [("x", x), *lin.named_parameters()])

    ln = LayerNorm(6)
    _randomize(ln, rs, 1.0)
    x, w = inp(4, 6), probe(4, 6)
    run("layernorm", lambda: (ln(x) * w).sum(), [("x", x), *ln.named_parameters()])

    msa = MultiHeadAttention(8, 2, make_rng(seed, 2))
    _randomize(msa, rs)
    x, w = inp(2, 5, 8), probe(2, 5, 8)
    run("msa", lambda: (msa(x)[0] * w).sum(), [("x", x), *msa.named_parameters()])

    blk = GlamBlock(8, 2, 2, make_rng(seed, 3))
    bank = GlobalTokenBank(2, 8, make_rng(seed, 4))
    _randomize(blk, rs)
    _randomize(bank, rs)
    x, w = inp(1, 16, 8), probe(1, 4, 6, 8)
    run("glam_block", lambda: (blk(concat_globals(window_partition(x, 2), bank))[0] * w).sum(),
        [("x", x), ("global_tokens", bank.tokens), *blk.named_parameters()])

    nlu = NluLayer(8, 16, 2, make_rng(seed, 5))
    _randomize(nlu, rs)
    skip, low, w = inp(1, 16, 8), inp(1, 4, 16), probe(1, 16, 8)
    run("nlu", lambda: (nlu(skip, low, (2, 2))[0] * w).sum(),
        [("skip", skip), ("low", low), *nlu.named_parameters()])

    cfg = ModelConfig(image_size=(16, 16), patch_size=2, channels=8, window=2, stages=((1, True), (1, True)),
                      n_g=2, num_classes=3, head_dim=4)
    model = SegModel(cfg, seed=seed)
    _randomize(model, rs, 0.3)
    img = Tensor(rs.random((1, 16, 16, 3)))
    labels = rs.integers(0, 3, (1, 64))
    run("model_loss", lambda: segmentation_loss(model(img), labels), list(model.named_parameters()))
    return out
