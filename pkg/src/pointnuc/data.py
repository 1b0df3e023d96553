"""Synthetic nuclei generation, patch cropping and on-disk dataset I/O.

Dataset layout::

    <root>/manifest.json
    <root>/<split>/<sample_id>.img.png      8-bit RGB
    <root>/<split>/<sample_id>.inst.png     16-bit instance ids, 0 = background
    <root>/<split>/<sample_id>.points.json  [[row, col], ...]
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MAX_OVERLAP = 0.2
MAX_PLACEMENT_ATTEMPTS = 500

_BACKGROUND_RGB = np.array([0.92, 0.78, 0.85])
_NUCLEUS_RGB = np.array([0.42, 0.22, 0.52])


class DatasetError(ValueError):
    """Raised when a dataset directory or sample violates the documented layout."""


class PlacementError(RuntimeError):
    """Raised when synthetic nuclei cannot be placed within the attempt budget."""


@dataclass
class ImageSample:
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    instance_mask: np.ndarray  # (H, W) int, 0 = background
    points: list[tuple[int, int]]
    sample_id: str

    @property
    def size(self) -> tuple[int, int]:
        return self.instance_mask.shape[0], self.instance_mask.shape[1]


@dataclass
class DatasetManifest:
    split: str
    samples: list[str]
    image_size: tuple[int, int]
    source: str = "synthetic"

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "samples": list(self.samples),
            "image_size": list(self.image_size),
            "source": self.source,
        }


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

def _ellipse(shape, center, axes, angle):
    rows, cols = np.ogrid[: shape[0], : shape[1]]
    dy = rows - center[0]
    dx = cols - center[1]
    cos, sin = np.cos(angle), np.sin(angle)
    u = (dy * cos + dx * sin) / axes[0]
    v = (-dy * sin + dx * cos) / axes[1]
    return u * u + v * v <= 1.0


def _is_single_component(region: np.ndarray) -> bool:
    _, n = ndimage.label(region)
    return n == 1


def _centroid_point(region: np.ndarray) -> tuple[int, int]:
    """Centroid rounded to the nearest pixel that belongs to ``region``."""
    rr, cc = np.nonzero(region)
    cy, cx = rr.mean(), cc.mean()
    r, c = int(np.floor(cy + 0.5)), int(np.floor(cx + 0.5))
    if 0 <= r < region.shape[0] and 0 <= c < region.shape[1] and region[r, c]:
        return r, c
    k = int(np.argmin((rr - cy) ** 2 + (cc - cx) ** 2))
    return int(rr[k]), int(cc[k])


def _place_nuclei(rng, size, n, radius_range, image_index):
    H, W = size
    labels = np.zeros(size, dtype=np.int32)
    shapes: list[np.ndarray] = []
    rmin, rmax = radius_range
    for k in range(n):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            axes = rng.uniform(rmin, rmax, size=2)
            angle = rng.uniform(0.0, np.pi)
            reach = float(axes.max())
            cy = rng.uniform(reach, H - 1 - reach)
            cx = rng.uniform(reach, W - 1 - reach)
            shape = _ellipse(size, (cy, cx), axes, angle)
            area = int(shape.sum())
            if area == 0:
                continue
            if any(
                np.count_nonzero(shape & other) > MAX_OVERLAP * min(area, int(other.sum()))
                for other in shapes
            ):
                continue
            trial = labels.copy()
            trial[shape] = k + 1
            touched = np.unique(labels[shape])
            if all(t == 0 or _is_single_component(trial == t) for t in touched):
                labels = trial
                shapes.append(shape)
                break
        else:
            raise PlacementError(
                f"image {image_index}: could not place nucleus {k + 1} of {n} after "
                f"{MAX_PLACEMENT_ATTEMPTS} attempts (image_size={size}, "
                f"radius_range={radius_range}); configuration is too dense"
            )
    return labels


def _render(rng, labels, texture_noise):
    H, W = labels.shape
    texture = ndimage.gaussian_filter(rng.normal(size=(H, W)), sigma=4.0)
    texture /= max(np.abs(texture).max(), 1e-8)
    image = _BACKGROUND_RGB[None, None, :] + 0.04 * texture[..., None]
    chromatin = ndimage.gaussian_filter(rng.normal(size=(H, W)), sigma=1.0)
    chromatin /= max(np.abs(chromatin).max(), 1e-8)
    for k in range(1, int(labels.max()) + 1):
        region = labels == k
        tone = _NUCLEUS_RGB + rng.uniform(-0.06, 0.06)
        image[region] = tone + 0.05 * chromatin[region][:, None]
    image = np.stack([ndimage.gaussian_filter(image[..., c], 0.6) for c in range(3)], -1)
    if texture_noise > 0:
        image = image + rng.uniform(-texture_noise, texture_noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    # quantize so that a PNG round trip is lossless
    return np.round(image * 255.0) / 255.0


def synthesize_sample(rng, image_size, nuclei_per_image, radius_range, texture_noise,
                      sample_id, image_index=0) -> ImageSample:
    n = int(rng.integers(nuclei_per_image[0], nuclei_per_image[1] + 1))
    labels = _place_nuclei(rng, image_size, n, radius_range, image_index)
    image = _render(rng, labels, texture_noise)
    points = [_centroid_point(labels == k) for k in range(1, n + 1)]
    return ImageSample(image=image, instance_mask=labels, points=points, sample_id=sample_id)


def generate_synthetic_dataset(
    n_images: int,
    image_size: Sequence[int] = (128, 128),
    nuclei_per_image: Sequence[int] = (8, 15),
    radius_range: Sequence[float] = (4.0, 9.0),
    texture_noise: float = 0.1,
    seed: int = 0,
    prefix: str = "syn",
) -> list[ImageSample]:
    """Generate ``n_images`` seeded samples of elliptical nuclei.

    Each image draws from its own child seed of ``seed``, so generation is
    deterministic and independent per image.
    """
    H, W = (int(s) for s in image_size)
    lo, hi = (int(v) for v in nuclei_per_image)
    rmin, rmax = (float(v) for v in radius_range)
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    if not 1 <= lo <= hi:
        raise ValueError(f"invalid nuclei_per_image range {nuclei_per_image}")
    if not 0 < rmin <= rmax or rmax >= min(H, W) / 4:
        raise ValueError(f"radius_range {radius_range} must satisfy 0 < min <= max < min(H, W)/4")
    if not 0.0 <= texture_noise <= 1.0:
        raise ValueError("texture_noise must be in [0, 1]")

    children = np.random.SeedSequence(seed).spawn(n_images)
    return [
        synthesize_sample(
            np.random.default_rng(child), (H, W), (lo, hi), (rmin, rmax), texture_noise,
            sample_id=f"{prefix}{i:04d}", image_index=i,
        )
        for i, child in enumerate(children)
    ]


def split_counts(n: int, ratio: Sequence[int] = (3, 1, 1)) -> tuple[int, int, int]:
    """Split ``n`` items by ``ratio``; rounding remainders go to train."""
    total = sum(ratio)
    val = n * ratio[1] // total
    test = n * ratio[2] // total
    return n - val - test, val, test


def split_samples(samples: Sequence[ImageSample], counts: Sequence[int]) -> dict[str, list[ImageSample]]:
    if sum(counts) != len(samples):
        raise ValueError(f"split counts {tuple(counts)} do not add up to {len(samples)} samples")
    out, start = {}, 0
    for split, n in zip(SPLITS, counts):
        out[split] = list(samples[start : start + n])
        start += n
    return out


# ---------------------------------------------------------------------------
# patch cropping
# ---------------------------------------------------------------------------

def patch_anchors(length: int, patch: int, overlap: int) -> list[int]:
    stride = patch - overlap
    anchors = list(range(0, length - patch + 1, stride))
    if anchors[-1] != length - patch:
        anchors.append(length - patch)
    return anchors


def relabel_consecutive(labels: np.ndarray) -> np.ndarray:
    ids = np.unique(labels)
    ids = ids[ids != 0]
    lut = np.zeros(int(labels.max()) + 1 if labels.size else 1, dtype=np.int32)
    lut[ids] = np.arange(1, len(ids) + 1, dtype=np.int32)
    return lut[labels]


def crop_window(sample: ImageSample, top: int, left: int, height: int, width: int,
                sample_id: str | None = None) -> ImageSample:
    image = sample.image[top : top + height, left : left + width].copy()
    inst = relabel_consecutive(sample.instance_mask[top : top + height, left : left + width])
    points = [
        (r - top, c - left)
        for r, c in sample.points
        if top <= r < top + height and left <= c < left + width
    ]
    return ImageSample(image, inst, points, sample_id or f"{sample.sample_id}_r{top}_c{left}")


def crop_patches(sample: ImageSample, patch: int, overlap: int) -> list[ImageSample]:
    """Tile ``sample`` into square patches; edge patches are clamped to the border."""
    H, W = sample.size
    if patch > min(H, W):
        raise ValueError(f"patch {patch} larger than image {H}x{W}")
    if not 0 <= overlap < patch:
        raise ValueError(f"overlap must be in [0, {patch}), got {overlap}")
    return [
        crop_window(sample, top, left, patch, patch)
        for top in patch_anchors(H, patch, overlap)
        for left in patch_anchors(W, patch, overlap)
    ]


# ---------------------------------------------------------------------------
# validation and I/O
# ---------------------------------------------------------------------------

def validate_sample(sample: ImageSample, where: str = "") -> None:
    """Check the ImageSample invariants, raising DatasetError on the first violation."""
    where = where or sample.sample_id
    H, W = sample.size
    if sample.image.shape != (H, W, 3):
        raise DatasetError(f"{where}: image shape {sample.image.shape} does not match mask {H}x{W}")
    inst = sample.instance_mask
    if inst.size and inst.min() < 0:
        raise DatasetError(f"{where}: negative instance ids")
    ids = np.unique(inst)
    ids = ids[ids != 0]
    if len(ids) and not np.array_equal(ids, np.arange(1, len(ids) + 1)):
        raise DatasetError(f"{where}: non-consecutive ids {ids.tolist()}")
    seen = set()
    for r, c in sample.points:
        if not (0 <= r < H and 0 <= c < W):
            raise DatasetError(f"{where}: point ({r}, {c}) outside image bounds {H}x{W}")
        k = int(inst[r, c])
        if k == 0:
            raise DatasetError(f"{where}: point ({r}, {c}) lies on background")
        if k in seen:
            raise DatasetError(f"{where}: instance {k} carries more than one point")
        seen.add(k)


def write_sample(directory: Path, sample: ImageSample) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    img8 = np.round(np.clip(sample.image, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(img8, mode="RGB").save(directory / f"{sample.sample_id}.img.png")
    if sample.instance_mask.max(initial=0) > 65535:
        raise DatasetError(f"{sample.sample_id}: more than 65535 instances")
    Image.fromarray(sample.instance_mask.astype(np.uint16)).save(directory / f"{sample.sample_id}.inst.png")
    with open(directory / f"{sample.sample_id}.points.json", "w") as fh:
        json.dump([[int(r), int(c)] for r, c in sample.points], fh)


def read_sample(directory: Path, sample_id: str) -> ImageSample:
    directory = Path(directory)
    paths = {
        kind: directory / f"{sample_id}.{kind}"
        for kind in ("img.png", "inst.png", "points.json")
    }
    for path in paths.values():
        if not path.is_file():
            raise DatasetError(f"{sample_id}: missing file {path}")
    image = np.asarray(Image.open(paths["img.png"]).convert("RGB"), dtype=np.float64) / 255.0
    inst = np.asarray(Image.open(paths["inst.png"])).astype(np.int32)
    if inst.ndim != 2:
        raise DatasetError(f"{sample_id}: instance mask {paths['inst.png']} is not single-channel")
    try:
        with open(paths["points.json"]) as fh:
            raw = json.load(fh)
        points = [(int(r), int(c)) for r, c in raw]
    except (ValueError, TypeError) as exc:
        raise DatasetError(f"{sample_id}: malformed points file {paths['points.json']}: {exc}") from exc
    sample = ImageSample(image, inst, points, sample_id)
    validate_sample(sample, where=f"{sample_id} ({directory})")
    return sample


def save_dataset(root, splits: dict[str, Sequence[ImageSample]], source: str = "synthetic",
                 extra: dict | None = None) -> dict[str, DatasetManifest]:
    """Write samples to ``root`` in the dataset layout and return per-split manifests."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    sizes = {s.size for samples in splits.values() for s in samples}
    if len(sizes) != 1:
        raise DatasetError(f"all samples must share one image size, got {sorted(sizes)}")
    image_size = sizes.pop()
    all_ids = [s.sample_id for samples in splits.values() for s in samples]
    if len(set(all_ids)) != len(all_ids):
        raise DatasetError("sample ids must be unique across splits")
    manifests = {}
    for split, samples in splits.items():
        for sample in samples:
            write_sample(root / split, sample)
        manifests[split] = DatasetManifest(split, [s.sample_id for s in samples], image_size, source)
    doc = {
        "image_size": list(image_size),
        "source": source,
        "splits": {k: m.samples for k, m in manifests.items()},
    }
    if extra:
        doc["generator"] = extra
    (root / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    return manifests


def load_dataset(root) -> dict[str, DatasetManifest]:
    """Read ``manifest.json`` and validate every listed sample on disk."""
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise DatasetError(f"missing manifest {path}")
    doc = json.loads(path.read_text())
    image_size = tuple(int(v) for v in doc["image_size"])
    source = doc.get("source", "external")
    seen: set[str] = set()
    manifests = {}
    for split, ids in doc["splits"].items():
        if split not in SPLITS:
            raise DatasetError(f"{path}: unknown split {split!r}")
        dup = seen.intersection(ids) | {i for i in ids if ids.count(i) > 1}
        if dup:
            raise DatasetError(f"{path}: duplicate sample ids {sorted(dup)}")
        seen.update(ids)
        for sid in ids:
            sample = read_sample(root / split, sid)
            if sample.size != image_size:
                raise DatasetError(f"{sid}: size {sample.size} differs from manifest {image_size}")
        manifests[split] = DatasetManifest(split, list(ids), image_size, source)
    return manifests


def load_split(root, split: str) -> list[ImageSample]:
    root = Path(root)
    doc = json.loads((root / "manifest.json").read_text())
    ids = doc["splits"].get(split, [])
    return [read_sample(root / split, sid) for sid in ids]


def generate_dataset_dir(root, counts: Iterable[int], seed: int = 0, **params) -> dict[str, DatasetManifest]:
    """Generate a synthetic dataset with the given (train, val, test) counts and save it."""
    counts = tuple(counts)
    samples = generate_synthetic_dataset(sum(counts), seed=seed, **params)
    extra = {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}
    extra["seed"] = seed
    return save_dataset(root, split_samples(samples, counts), "synthetic", extra)
