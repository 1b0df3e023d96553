import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from pointnuc.data import (
    DatasetError,
    ImageSample,
    PlacementError,
    crop_patches,
    generate_dataset_dir,
    generate_synthetic_dataset,
    load_dataset,
    load_split,
    patch_anchors,
    save_dataset,
    split_counts,
    write_sample,
)


def test_single_nucleus_has_one_point_at_its_centroid():
    (s,) = generate_synthetic_dataset(1, (64, 64), (1, 1), (5, 8), 0.0, seed=7)
    assert s.instance_mask.max() == 1
    assert len(s.points) == 1
    rows, cols = np.nonzero(s.instance_mask == 1)
    assert s.points[0] == (int(round(rows.mean())), int(round(cols.mean())))


def test_same_seed_is_bit_identical():
    a = generate_synthetic_dataset(2, (64, 64), (3, 5), (4, 7), 0.1, seed=11)
    b = generate_synthetic_dataset(2, (64, 64), (3, 5), (4, 7), 0.1, seed=11)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.instance_mask.tobytes() == y.instance_mask.tobytes()
        assert x.points == y.points


def test_desk_generator_counts_match_connected_component_oracle():
    samples = generate_synthetic_dataset(40, (128, 128), (8, 15), (4, 9), 0.1, seed=1)
    for s in samples:
        comps = oracles.count_components(s.instance_mask.tolist())
        # every label forms exactly one region, and there are 8..15 of them
        assert set(comps.values()) == {1}
        assert 8 <= len(comps) <= 15
        assert len(s.points) == len(comps) == s.instance_mask.max()


def test_over_dense_configuration_raises():
    with pytest.raises(PlacementError, match="too dense"):
        generate_synthetic_dataset(1, (32, 32), (60, 60), (6, 7), 0.0, seed=0)


@pytest.mark.parametrize("bad", [
    dict(n_images=0),
    dict(nuclei_per_image=(5, 2)),
    dict(radius_range=(4, 20)),
    dict(texture_noise=1.5),
])
def test_invalid_generator_arguments(bad):
    args = dict(n_images=1, image_size=(64, 64), nuclei_per_image=(1, 2), radius_range=(3, 5),
                texture_noise=0.1, seed=0)
    args.update(bad)
    with pytest.raises(ValueError):
        generate_synthetic_dataset(**args)


def test_split_counts():
    assert split_counts(56, (40, 8, 8)) == (40, 8, 8)
    assert split_counts(10) == (6, 2, 2)
    assert sum(split_counts(17)) == 17


# -- patches ---------------------------------------------------------------

def _enumerate_anchors(length, patch, overlap):
    # independent re-derivation: step forward, then clamp one final anchor to the edge
    anchors, a = [], 0
    while a + patch <= length:
        anchors.append(a)
        a += patch - overlap
    if anchors[-1] + patch < length:
        anchors.append(length - patch)
    return anchors


def _blank(H, W, n=0):
    mask = np.zeros((H, W), dtype=np.int32)
    pts = []
    for k in range(1, n + 1):
        r, c = (k * 37) % (H - 4) + 2, (k * 53) % (W - 4) + 2
        mask[r - 1 : r + 2, c - 1 : c + 2] = k
        pts.append((r, c))
    return ImageSample(np.zeros((H, W, 3)), mask, pts, "blank")


def test_512_image_gives_nine_patches():
    assert patch_anchors(512, 256, 128) == [0, 128, 256]
    assert len(crop_patches(_blank(512, 512), 256, 128)) == 9


def test_300_image_clamps_last_anchor():
    assert patch_anchors(300, 256, 128) == _enumerate_anchors(300, 256, 128) == [0, 44]
    assert len(crop_patches(_blank(300, 300), 256, 128)) == 4


def test_full_size_patch_is_identity():
    s = _blank(64, 64, n=3)
    (p,) = crop_patches(s, 64, 0)
    assert np.array_equal(p.instance_mask, s.instance_mask)
    assert p.points == s.points


def test_patch_larger_than_image_raises():
    with pytest.raises(ValueError):
        crop_patches(_blank(64, 64), 65, 0)


@given(length=st.integers(16, 200), patch=st.integers(8, 64), frac=st.floats(0, 0.9))
def test_patches_cover_every_pixel(length, patch, frac):
    patch = min(patch, length)
    overlap = min(int(patch * frac), patch - 1)
    anchors = patch_anchors(length, patch, overlap)
    assert anchors == _enumerate_anchors(length, patch, overlap)
    cover = np.zeros(length, dtype=int)
    for a in anchors:
        cover[a : a + patch] += 1
    assert cover.min() >= 1


def test_crop_relabels_and_drops_outside_points():
    s = _blank(64, 64, n=6)
    for p in crop_patches(s, 32, 8):
        ids = np.unique(p.instance_mask)
        ids = ids[ids != 0]
        assert np.array_equal(ids, np.arange(1, len(ids) + 1))
        for r, c in p.points:
            assert 0 <= r < 32 and 0 <= c < 32


# -- storage ---------------------------------------------------------------

def test_round_trip(tmp_path):
    manifests = generate_dataset_dir(tmp_path, (3, 1, 1), seed=5, image_size=(64, 64),
                                     nuclei_per_image=(2, 4), radius_range=(3, 6))
    loaded = load_dataset(tmp_path)
    assert {k: m.to_dict() for k, m in loaded.items()} == {k: m.to_dict() for k, m in manifests.items()}
    original = generate_synthetic_dataset(5, (64, 64), (2, 4), (3, 6), 0.1, seed=5)
    reread = [s for split in ("train", "val", "test") for s in load_split(tmp_path, split)]
    for a, b in zip(original, reread):
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.instance_mask, b.instance_mask)
        assert a.points == b.points
    assert len(loaded["train"].samples) == 3


def _write_single(root, sample):
    save_dataset(root, {"train": [sample]})


def test_point_outside_bounds_names_sample(tmp_path):
    s = _blank(32, 32, n=1)
    _write_single(tmp_path, s)
    (tmp_path / "train" / "blank.points.json").write_text(json.dumps([[-1, 5]]))
    with pytest.raises(DatasetError, match="blank"):
        load_dataset(tmp_path)


def test_non_consecutive_ids_rejected(tmp_path):
    s = _blank(32, 32, n=3)
    s.instance_mask[s.instance_mask == 2] = 0
    s.points = [p for k, p in enumerate(s.points, start=1) if k != 2]
    write_sample(tmp_path / "train", s)
    (tmp_path / "manifest.json").write_text(json.dumps(
        {"image_size": [32, 32], "source": "synthetic", "splits": {"train": ["blank"]}}))
    with pytest.raises(DatasetError, match="non-consecutive ids"):
        load_dataset(tmp_path)


def test_missing_file_rejected(tmp_path):
    _write_single(tmp_path, _blank(32, 32, n=1))
    (tmp_path / "train" / "blank.inst.png").unlink()
    with pytest.raises(DatasetError, match="missing file"):
        load_dataset(tmp_path)


def test_every_sample_satisfies_point_instance_invariant():
    for s in generate_synthetic_dataset(6, (64, 64), (2, 6), (3, 6), 0.2, seed=9):
        assert len(s.points) == s.instance_mask.max() == len(np.unique(s.instance_mask)) - 1
        assert sorted(s.instance_mask[r, c] for r, c in s.points) == list(range(1, len(s.points) + 1))
