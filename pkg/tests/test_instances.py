import numpy as np
import torch
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

import oracles
from pointnuc.instances import assemble_instances, box_iou, decode_boxes, nms
from pointnuc.labels import BoxSet
from pointnuc.network import DetLevel
from strategies import random_boxes

seeds = st.integers(0, 2**32 - 1)


def test_duplicate_boxes_collapse():
    boxes = np.array([[0, 0, 9, 9], [0, 0, 9, 9]])
    assert nms(boxes, np.array([0.8, 0.9]), 0.5).tolist() == [1]


def test_disjoint_boxes_both_survive():
    boxes = np.array([[0, 0, 4, 4], [10, 10, 14, 14]])
    for thr in (0.01, 0.5, 0.99):
        assert sorted(nms(boxes, np.array([0.3, 0.6]), thr).tolist()) == [0, 1]


@given(seeds, st.sampled_from([0.1, 0.3, 0.5, 0.7]))
def test_nms_matches_quadratic_oracle(seed, thr):
    boxes, scores = random_boxes(np.random.default_rng(seed))
    assert nms(boxes, scores, thr).tolist() == oracles.nms(boxes.tolist(), scores.tolist(), thr)


@given(seeds)
def test_box_iou_matches_oracle(seed):
    boxes, _ = random_boxes(np.random.default_rng(seed), n=6)
    got = box_iou(boxes, boxes)
    for i in range(6):
        for j in range(6):
            assert abs(got[i, j] - oracles.box_iou(boxes[i].tolist(), boxes[j].tolist())) < 1e-12


def test_box_containing_blob():
    prob = np.zeros((12, 12))
    prob[3:7, 4:9] = 0.9
    out = assemble_instances(prob, BoxSet([[2, 2, 8, 10]], [0.8]))
    assert np.array_equal(out, (prob > 0.5).astype(np.int32))


def test_disjoint_boxes_over_disjoint_blobs():
    prob = np.zeros((20, 20))
    prob[1:5, 1:5] = 1
    prob[10:16, 12:18] = 1
    out = assemble_instances(prob, BoxSet([[0, 0, 6, 6], [9, 11, 17, 19]], [0.6, 0.9]), min_area=1)
    assert set(np.unique(out[1:5, 1:5])) == {2} and set(np.unique(out[10:16, 12:18])) == {1}


def test_bridge_pixel_goes_to_higher_score():
    prob = np.zeros((10, 10))
    prob[2:5, 1:5] = 1
    prob[2:5, 5:9] = 1  # one blob spanning both boxes; column 4-5 is the bridge
    boxes = BoxSet([[1, 0, 6, 5], [1, 4, 6, 9]], [0.7, 0.9])
    out = assemble_instances(prob, boxes, min_area=1)
    # hand oracle: walk pixels, the 0.9 box (column >= 4) owns everything it covers
    for r in range(10):
        for c in range(10):
            if prob[r, c] == 0:
                assert out[r, c] == 0
            elif 4 <= c <= 9:
                assert out[r, c] == 1
            else:
                assert out[r, c] == 2


def _random_scene(rng, size=32):
    prob = ndimage.gaussian_filter(rng.random((size, size)), 2)
    prob = (prob - prob.min()) / (prob.max() - prob.min())
    boxes, scores = random_boxes(rng, n=int(rng.integers(0, 6)), size=size)
    return prob, BoxSet(boxes, scores)


@given(seeds)
def test_instances_partition_foreground(seed):
    rng = np.random.default_rng(seed)
    prob, boxes = _random_scene(rng)
    out = assemble_instances(prob, boxes, 0.5, min_area=4)
    fg = prob > 0.5
    assert not (out.astype(bool) & ~fg).any()
    ids = np.unique(out)
    ids = ids[ids != 0]
    assert np.array_equal(ids, np.arange(1, len(ids) + 1))
    # whatever foreground is unlabeled belongs to small leftover components
    dropped = fg & (out == 0)
    comps, n = ndimage.label(dropped)
    assert all((comps == k).sum() < 4 for k in range(1, n + 1))
    assert np.array_equal(out, assemble_instances(prob, boxes, 0.5, min_area=4))


@given(seeds)
def test_no_boxes_is_component_labeling(seed):
    rng = np.random.default_rng(seed)
    prob, _ = _random_scene(rng)
    out = assemble_instances(torch.tensor(prob), BoxSet(), 0.5, min_area=5)
    comps, n = ndimage.label(prob > 0.5)
    kept = [k for k in range(1, n + 1) if (comps == k).sum() >= 5]
    expected = np.zeros_like(out)
    for new, k in enumerate(kept, start=1):
        expected[comps == k] = new
    assert np.array_equal(out, expected)


def test_decode_places_box_around_a_confident_cell():
    levels = []
    for stride in (8, 16, 32):
        h = 64 // stride
        cls = torch.full((1, h, h), -10.0)
        ctr = torch.full((1, h, h), 10.0)
        box = torch.full((4, h, h), 4.0)
        if stride == 8:
            cls[0, 2, 3] = 10.0  # centre (20, 28)
        levels.append(DetLevel(stride, cls, box, ctr))
    out = decode_boxes(levels, (64, 64))
    assert out.boxes.tolist() == [[16, 24, 23, 31]]
    assert out.scores[0] > 0.99
