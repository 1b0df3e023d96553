"""Tri-valued point-derived labels and pseudo boxes."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

FOREGROUND = 1
BACKGROUND = 0
IGNORED = 255


class MaskKind(str, enum.Enum):
    INITIAL_M = "initial_m"
    BINARIZED_C = "binarized_c"
    OPTIMIZED_P = "optimized_p"


@dataclass
class TriMask:
    """Per-pixel {FOREGROUND, BACKGROUND, IGNORED} map stored as uint8 (1 / 0 / 255)."""

    values: np.ndarray
    kind: MaskKind = MaskKind.INITIAL_M

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.uint8)
        bad = ~np.isin(self.values, (FOREGROUND, BACKGROUND, IGNORED))
        if bad.any():
            raise ValueError(f"TriMask holds values outside {{0, 1, 255}}: {np.unique(self.values[bad])}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def omega(self) -> np.ndarray:
        """Boolean map of non-ignored pixels."""
        return self.values != IGNORED

    @property
    def foreground(self) -> np.ndarray:
        return self.values == FOREGROUND

    @property
    def background(self) -> np.ndarray:
        return self.values == BACKGROUND

    def save(self, path) -> None:
        Image.fromarray(self.values).save(Path(path))

    @classmethod
    def load(cls, path, kind: MaskKind = MaskKind.INITIAL_M) -> "TriMask":
        return cls(np.asarray(Image.open(Path(path))), kind)


def as_values(mask) -> np.ndarray:
    return mask.values if isinstance(mask, TriMask) else np.asarray(mask, dtype=np.uint8)


@dataclass
class BoxSet:
    """Axis-aligned boxes as inclusive pixel extents (row_min, col_min, row_max, col_max)."""

    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), dtype=np.int64))
    scores: np.ndarray = field(default_factory=lambda: np.zeros((0,), dtype=np.float64))

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.int64).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.boxes) != len(self.scores):
            raise ValueError("boxes and scores differ in length")
        if np.any(self.boxes[:, 2] < self.boxes[:, 0]) or np.any(self.boxes[:, 3] < self.boxes[:, 1]):
            raise ValueError("box extents must satisfy min <= max")

    def __len__(self) -> int:
        return len(self.boxes)


def build_initial_label(points: Sequence[Sequence[int]], image_size: Sequence[int],
                        r: float = 4, d: float = 20) -> TriMask:
    """Disc of radius ``r`` around each point is foreground, beyond ``d`` is background.

    Distances are Euclidean between pixel centres; both bounds are inclusive
    (``dist <= r`` foreground, ``dist > d`` background).
    """
    if not 0 < r < d:
        raise ValueError(f"need 0 < r < d, got r={r}, d={d}")
    H, W = int(image_size[0]), int(image_size[1])
    values = np.full((H, W), BACKGROUND, dtype=np.uint8)
    if len(points) == 0:
        return TriMask(values, MaskKind.INITIAL_M)
    seeds = np.ones((H, W), dtype=bool)
    for pr, pc in points:
        seeds[int(pr), int(pc)] = False
    dist = ndimage.distance_transform_edt(seeds)
    values[dist <= d] = IGNORED
    values[dist <= r] = FOREGROUND
    return TriMask(values, MaskKind.INITIAL_M)


def build_pseudo_boxes(points: Sequence[Sequence[int]], box_radius: int,
                       image_size: Sequence[int]) -> BoxSet:
    """One square box of half-side ``box_radius`` per point, clipped to the image."""
    if box_radius < 1:
        raise ValueError("box_radius must be >= 1")
    H, W = int(image_size[0]), int(image_size[1])
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    boxes = np.stack(
        [
            np.clip(pts[:, 0] - box_radius, 0, H - 1),
            np.clip(pts[:, 1] - box_radius, 0, W - 1),
            np.clip(pts[:, 0] + box_radius, 0, H - 1),
            np.clip(pts[:, 1] + box_radius, 0, W - 1),
        ],
        axis=1,
    )
    return BoxSet(boxes, np.ones(len(pts)))
