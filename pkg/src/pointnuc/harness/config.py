"""Training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Union, get_args, get_origin, get_type_hints

DYNAMIC = "dynamic"


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # initial label and pseudo boxes
    r: float = 4.0
    d: float = 20.0
    box_radius: int = 0  # 0 -> r + 2
    # selection / contrastive / loss weights
    theta: float = 0.8
    tau: float = 1.0
    omega1: float = 0.5
    omega2: float = 2.0
    ccl_samples: int = 256
    embed_dim: int = 32
    cam_block_override: str = DYNAMIC  # "dynamic" or "1".."4"
    cam_every: int = 1
    enable_dcs: bool = True
    enable_ccl: bool = True
    warmup_epochs: int = 1
    # optimizer
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_clip: float = 10.0
    epochs: int = 10
    batch_size: int = 4
    seed: int = 0
    # model
    base_width: int = 16
    fpn_channels: int = 32
    loc_grid: int = 4
    loc_sigma: float = 2.0
    det_assign: str = "stride8"
    # data
    data_dir: str = ""
    train_split: str = "train"
    val_split: str = "val"
    augment_flip: bool = True
    augment_rotate: bool = True
    augment_crop: bool = True
    crop_size: int = 96
    # inference
    score_threshold: float = 0.3
    nms_iou: float = 0.5
    mask_threshold: float = 0.5
    min_area: int = 10
    # runtime
    num_threads: int = 1
    deterministic: bool = True
    debug_dcs: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.theta > 0.5 or self.theta > 1.0:
            raise ConfigError(f"theta must lie in (0.5, 1], got {self.theta}")
        if not 0 < self.r < self.d:
            raise ConfigError(f"need 0 < r < d, got r={self.r}, d={self.d}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.ccl_samples < 1 or self.embed_dim < 1 or self.cam_every < 1:
            raise ConfigError("ccl_samples, embed_dim and cam_every must be >= 1")
        if self.det_assign not in ("stride8", "ranges"):
            raise ConfigError(f"det_assign must be 'stride8' or 'ranges', got {self.det_assign!r}")
        if self.crop_size % 32:
            raise ConfigError("crop_size must be a multiple of 32")
        self.block_override  # raises on bad values

    @property
    def block_override(self) -> int | None:
        value = str(self.cam_block_override).strip().lower()
        if value == DYNAMIC:
            return None
        if value in {"1", "2", "3", "4"}:
            return int(value)
        raise ConfigError(f"cam_block_override must be 'dynamic' or 1..4, got {self.cam_block_override!r}")

    @property
    def pseudo_box_radius(self) -> int:
        return self.box_radius if self.box_radius > 0 else int(round(self.r)) + 2

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        hints = get_type_hints(cls)
        kwargs = {k: _coerce(k, v, hints[k]) for k, v in values.items()}
        return cls(**kwargs)

    @classmethod
    def parse(cls, text: str) -> "TrainConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = value
        return cls.from_dict(values)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.parse(Path(path).read_text())


def _coerce(key, value, hint):
    if get_origin(hint) is Union:
        hint = next(a for a in get_args(hint) if a is not type(None))
    if not isinstance(value, str):
        return hint(value) if hint in (int, float) and not isinstance(value, bool) else value
    try:
        if hint is bool:
            lowered = value.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if hint is int:
            return int(value)
        if hint is float:
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {hint.__name__}") from None
    return value
