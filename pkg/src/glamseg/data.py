"""Synthetic key-patch segmentation task.

Each image holds a coloured key square in one corner and a few target squares
in other windows. Targets come in ``(num_classes - 1) // 2`` shape types
distinguishable by colour; the class of every target is decided by the key
colour, which is never visible from the target's own window. Background and
the key square are labelled 0.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import records
from .errors import GenerationError
from .rng import make_rng

KEY_COLORS = np.array([[0.95, 0.1, 0.1], [0.1, 0.2, 0.95]])
TARGET_COLORS = np.array([[0.95, 0.95, 0.95], [0.1, 0.85, 0.2], [0.95, 0.8, 0.1], [0.7, 0.2, 0.9]])
BACKGROUND = 0.35


@dataclass
class SyntheticTask:
    seed: int = 0
    image_size: int = 64
    patch_size: int = 4
    window: int = 4  # window side in tokens; pixel side is window * patch_size
    key_size: int = 2  # in patches
    targets_min: int = 1
    targets_max: int = 3
    target_size_min: int = 1  # in patches
    target_size_max: int = 2
    num_classes: int = 5
    noise: float = 0.05

    @property
    def window_px(self) -> int:
        return self.window * self.patch_size

    @property
    def num_shape_types(self) -> int:
        return (self.num_classes - 1) // 2

    def target_class(self, shape_type: int, key: int) -> int:
        return 1 + 2 * shape_type + key

    def validate(self) -> "SyntheticTask":
        s, wp = self.image_size, self.window_px
        if s % wp:
            raise GenerationError(f"image size {s} is not a multiple of the window size {wp} px")
        if (s // wp) ** 2 < 2:
            raise GenerationError(f"a {s}px image has a single {wp}px window; key and targets cannot be separated")
        if self.key_size * self.patch_size > wp or self.target_size_max * self.patch_size > wp:
            raise GenerationError("key/target squares must fit inside one window")
        if self.num_classes < 3 or self.num_classes % 2 == 0:
            raise GenerationError("num_classes must be odd and >= 3 (background + pairs of target classes)")
        if self.num_shape_types > len(TARGET_COLORS):
            raise GenerationError(f"at most {len(TARGET_COLORS)} target shape types are available")
        if not 1 <= self.targets_min <= self.targets_max:
            raise GenerationError("need 1 <= targets_min <= targets_max")
        if not 1 <= self.target_size_min <= self.target_size_max:
            raise GenerationError("need 1 <= target_size_min <= target_size_max")
        return self


def _window_of(task: SyntheticTask, y: int, x: int) -> int:
    g = task.image_size // task.window_px
    return (y // task.window_px) * g + x // task.window_px


def generate_one(task: SyntheticTask, index: int):
    """Sample ``index`` of the task; returns (image HxWx3 float32, labels HxW int64, key bit)."""
    rng = make_rng(task.seed, index)
    s, p, wp = task.image_size, task.patch_size, task.window_px
    g = s // wp
    image = np.full((s, s, 3), BACKGROUND)
    labels = np.zeros((s, s), dtype=np.int64)
    key = int(rng.integers(2))
    corner = int(rng.integers(4))
    ks = task.key_size * p
    ky = 0 if corner < 2 else s - ks
    kx = 0 if corner % 2 == 0 else s - ks
    image[ky:ky + ks, kx:kx + ks] = KEY_COLORS[key]
    key_window = _window_of(task, ky, kx)
    free = [w for w in range(g * g) if w != key_window]
    occupied = np.zeros((s, s), dtype=bool)
    occupied[ky:ky + ks, kx:kx + ks] = True
    n_targets = int(rng.integers(task.targets_min, task.targets_max + 1))
    placed = 0
    for _ in range(50 * n_targets):
        if placed == n_targets:
            break
        win = free[int(rng.integers(len(free)))]
        size = int(rng.integers(task.target_size_min, task.target_size_max + 1)) * p
        span = (wp - size) // p + 1
        y = (win // g) * wp + int(rng.integers(span)) * p
        x = (win % g) * wp + int(rng.integers(span)) * p
        if occupied[y:y + size, x:x + size].any():
            continue
        shape_type = int(rng.integers(task.num_shape_types))
        image[y:y + size, x:x + size] = TARGET_COLORS[shape_type]
        labels[y:y + size, x:x + size] = task.target_class(shape_type, key)
        occupied[y:y + size, x:x + size] = True
        placed += 1
    if placed == 0:
        raise GenerationError(f"sample {index}: could not place any target outside the key window")
    if task.noise:
        image = image + task.noise * rng.standard_normal(image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), labels, key


def generate(task: SyntheticTask, n: int, start: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    if n < 1:
        raise GenerationError("n must be >= 1")
    task.validate()
    return [generate_one(task, start + i)[:2] for i in range(n)]


def augment(image: np.ndarray, labels: np.ndarray, rng: np.random.Generator):
    """Random horizontal flip and 90-degree rotation, applied to both maps."""
    if rng.integers(2):
        image, labels = image[:, ::-1], labels[:, ::-1]
    k = int(rng.integers(4))
    if k:
        image, labels = np.rot90(image, k), np.rot90(labels, k)
    return np.ascontiguousarray(image), np.ascontiguousarray(labels)


def target_mask(labels: np.ndarray) -> np.ndarray:
    return np.asarray(labels) > 0


def target_accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    """Accuracy on target positions only (labels > 0). Chance is 1/2 for a
    model that knows the shape type but not the key."""
    m = target_mask(labels)
    return float((np.asarray(pred)[m] == np.asarray(labels)[m]).mean()) if m.any() else float("nan")


# -- on-disk format --------------------------------------------------------

MANIFEST = "manifest.txt"


def save_dataset(root: str | Path, task: SyntheticTask, samples) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {v}" for k, v in asdict(task).items()]
    lines.append(f"num_samples = {len(samples)}")
    for i, (img, lab) in enumerate(samples):
        name = f"sample_{i:05d}.bin"
        records.save(root / name, {"image": img, "labels": lab})
        lines.append(f"sample = {name}")
    (root / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return root


def load_dataset(root: str | Path):
    root = Path(root)
    kv: dict[str, str] = {}
    names: list[str] = []
    for line in (root / MANIFEST).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, val = (part.strip() for part in line.partition("="))
        if key == "sample":
            names.append(val)
        else:
            kv[key] = val
    types = {f.name: f.type for f in fields(SyntheticTask)}
    task = SyntheticTask(**{k: (float(v) if types[k] in (float, "float") else int(v))
                            for k, v in kv.items() if k in types})
    if int(kv.get("num_samples", len(names))) != len(names):
        raise GenerationError("manifest sample count does not match its sample list")
    samples = []
    for name in names:
        rec = records.load(root / name)
        samples.append((rec["image"], rec["labels"]))
    return task, samples
