"""Run configuration, validated on load."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    mode: str = "rbox"
    image_size: int = 128
    channels: int = 32
    backbone_widths: tuple[int, ...] = (16, 32, 48, 64)
    encoder_layers: int = 4
    heads: int = 4
    ffn: int = 128
    # token budgets listed coarsest scale first (1/32, 1/16, 1/8)
    budgets: tuple[int, int, int] = (16, 32, 64)
    adaptive_fraction: Optional[float] = None
    class_weight: float = 0.5
    det_weight: float = 1.0
    fs_weight: float = 1e-2
    fs_milestones: tuple[int, ...] = (35, 45)
    tau: float = 3.0
    gwd_normalization: str = "sqrt_area"
    lr: float = 1e-3
    lr_milestones: tuple[int, ...] = (40,)
    lr_decay: float = 0.1
    warmup_steps: int = 0          # linear lr ramp over the first optimizer steps
    weight_decay: float = 1e-4
    epochs: int = 60
    batch_size: int = 8
    train_scenes: int = 2000
    val_scenes: int = 200
    max_boxes: int = 6
    curved: bool = False
    seed: int = 0
    threshold: float = 0.5
    eval_every: int = 1
    data_dir: Optional[str] = None
    out_dir: str = "runs/default"

    def __post_init__(self):
        for name in ("backbone_widths", "budgets", "fs_milestones", "lr_milestones"):
            val = getattr(self, name)
            if isinstance(val, str):
                val = [int(v) for v in val.split(",") if v.strip()]
            setattr(self, name, tuple(int(v) for v in val))
        self.validate()

    def validate(self) -> None:
        if self.mode not in ("rbox", "bezier"):
            raise ConfigError(f"mode must be rbox or bezier, got {self.mode!r}")
        if self.image_size <= 0 or self.image_size % 32:
            raise ConfigError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if len(self.budgets) != 3 or any(b < 0 for b in self.budgets):
            raise ConfigError(f"budgets must be three non-negative counts, got {self.budgets}")
        cells = [(self.image_size // d) ** 2 for d in (32, 16, 8)]
        for b, c, d in zip(self.budgets, cells, (32, 16, 8)):
            if b > c:
                raise ConfigError(f"budget {b} exceeds the {c} cells of the 1/{d} score map")
        if self.adaptive_fraction is not None and not 0 < self.adaptive_fraction <= 1:
            raise ConfigError(f"adaptive_fraction must be in (0, 1], got {self.adaptive_fraction}")
        if self.channels % self.heads or self.channels % 4:
            raise ConfigError(f"channels {self.channels} must be divisible by heads and by 4")
        if self.gwd_normalization not in ("sqrt_area", "area"):
            raise ConfigError(f"unknown gwd_normalization {self.gwd_normalization!r}")
        if self.tau <= 1:
            raise ConfigError("tau must exceed 1")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0 or self.warmup_steps < 0:
            raise ConfigError("lr must be positive, batch_size >= 1, epochs >= 0, warmup_steps >= 0")
        if not 1 <= self.max_boxes:
            raise ConfigError("max_boxes must be at least 1")

    @property
    def budgets_fine_first(self) -> tuple[int, int, int]:
        return tuple(reversed(self.budgets))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def parse_budgets(text: str) -> tuple[int, int, int]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise ConfigError(f"budgets must look like n0,n1,n2, got {text!r}")
    return tuple(int(p) for p in parts)

