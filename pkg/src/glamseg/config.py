"""Flat ``key = value`` run configuration shared by all CLI commands.

One namespace covers the model, the optimiser and the synthetic data. Keys
that both the model and the data need (image size, patch size, window, number
of classes) appear once, so the two can never disagree. ``seed`` seeds all
three. Example::

    # toy.cfg
    image_size = 32
    stages = 2:glam        # depth:glam|win, comma separated
    n_g = 10
    steps = 200
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import SyntheticTask
from .errors import ConfigError
from .model import ModelConfig
from .train import TrainConfig

SHARED = ("image_size", "patch_size", "window", "num_classes")


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: SyntheticTask = field(default_factory=SyntheticTask)
    num_train: int = 256
    num_eval: int = 64

    def sync(self) -> "RunConfig":
        """Propagate the shared keys and the seed, then validate everything."""
        m, t = self.model, self.task
        if m.image_size[0] != m.image_size[1]:
            raise ConfigError("only square images are supported")
        t.image_size, t.patch_size, t.window, t.num_classes = m.image_size[0], m.patch_size, m.window, m.num_classes
        t.seed = self.train.seed = self.seed
        if self.num_train < 1 or self.num_eval < 1:
            raise ConfigError("num_train and num_eval must be positive")
        m.validate()
        t.validate()
        return self


def _stages_from(text: str):
    out = []
    for part in text.split(","):
        depth, _, kind = part.strip().partition(":")
        kind = kind.strip() or "glam"
        if kind not in ("glam", "win"):
            raise ConfigError(f"stage kind must be 'glam' or 'win', got {kind!r}")
        out.append((int(depth), kind == "glam"))
    return tuple(out)


def _stages_to(stages) -> str:
    return ",".join(f"{d}:{'glam' if g else 'win'}" for d, g in stages)


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _targets(cfg: RunConfig) -> dict:
    """key -> (object holding it, attribute)."""
    table = {"seed": (cfg, "seed"), "num_train": (cfg, "num_train"), "num_eval": (cfg, "num_eval")}
    for obj in (cfg.task, cfg.train, cfg.model):  # model wins on shared keys
        for f in fields(obj):
            if f.name != "seed":
                table[f.name] = (obj, f.name)
    return table


def set_value(cfg: RunConfig, key: str, text: str) -> None:
    table = _targets(cfg)
    if key not in table:
        raise ConfigError(f"unknown config key {key!r}")
    obj, attr = table[key]
    current = getattr(obj, attr)
    try:
        if key == "stages":
            val = _stages_from(text)
        elif key == "image_size":
            val = (int(text), int(text))
        elif isinstance(current, bool):
            val = _bool(text)
        elif isinstance(current, int):
            val = int(text)
        else:
            val = float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None
    setattr(obj, attr, val)


def parse(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, val = line.partition("=")
        if not eq:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        set_value(cfg, key.strip(), val.strip())
    return cfg


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse(text)


def dump(cfg: RunConfig) -> str:
    """Resolved config as ``key = value`` lines; ``parse(dump(c))`` gives ``c`` back."""
    seen = {}
    for key, (obj, attr) in _targets(cfg).items():
        val = getattr(obj, attr)
        if key == "stages":
            val = _stages_to(val)
        elif key == "image_size":
            val = val[0]
        elif isinstance(val, float):
            val = repr(val)
        seen[key] = val
    return "".join(f"{k} = {seen[k]}\n" for k in sorted(seen))
