"""Box decoding and box-guided instance assembly."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from scipy import ndimage

from .labels import BoxSet
from .losses import level_locations


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of inclusive pixel boxes, (n, 4) x (m, 4) -> (n, m)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0] + 1) * (a[:, 3] - a[:, 1] + 1)
    area_b = (b[:, 2] - b[:, 0] + 1) * (b[:, 3] - b[:, 1] + 1)
    h = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]) + 1
    w = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]) + 1
    inter = np.clip(h, 0, None) * np.clip(w, 0, None)
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending-score order (ties by input order)."""
    boxes = np.asarray(boxes).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    keep = []
    while len(order):
        i = order[0]
        keep.append(i)
        if len(order) == 1:
            break
        ious = box_iou(boxes[i], boxes[order[1:]])[0]
        order = order[1:][ious <= iou_threshold]
    return np.asarray(keep, dtype=np.int64)


def _to_pixel_extent(lo: np.ndarray, hi: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray]:
    # continuous [lo, hi) -> inclusive pixel rows whose centres fall inside
    first = np.clip(np.ceil(lo - 0.5), 0, size - 1)
    last = np.clip(np.ceil(hi - 0.5) - 1, 0, size - 1)
    return first.astype(np.int64), np.maximum(last, first).astype(np.int64)


def decode_boxes(det_outputs, image_size: Sequence[int], score_threshold: float = 0.3,
                 iou_threshold: float = 0.5) -> BoxSet:
    """Boxes from unbatched per-level maps, scored by sigmoid(cls) * sigmoid(centerness)."""
    if not (0 < score_threshold < 1 and 0 < iou_threshold < 1):
        raise ValueError("thresholds must lie in (0, 1)")
    H, W = image_size
    all_boxes, all_scores = [], []
    for level in det_outputs:
        with torch.no_grad():
            cls = torch.sigmoid(level.cls_logits.detach().double()).reshape(-1)
            ctr = torch.sigmoid(level.ctr_logits.detach().double()).reshape(-1)
            dist = level.box.detach().double().reshape(4, -1)
        shape = level.cls_logits.shape[-2:]
        ys, xs = level_locations(shape, level.stride)
        scores = (cls * ctr).numpy()
        keep = scores > score_threshold
        if not keep.any():
            continue
        ys = ys.reshape(-1).numpy()[keep]
        xs = xs.reshape(-1).numpy()[keep]
        l, t, r, b = dist.numpy()[:, keep]
        r0, r1 = _to_pixel_extent(ys - t, ys + b, H)
        c0, c1 = _to_pixel_extent(xs - l, xs + r, W)
        all_boxes.append(np.stack([r0, c0, r1, c1], 1))
        all_scores.append(scores[keep])
    if not all_boxes:
        return BoxSet()
    boxes = np.concatenate(all_boxes)
    scores = np.concatenate(all_scores)
    kept = nms(boxes, scores, iou_threshold)
    return BoxSet(boxes[kept], scores[kept])


def assemble_instances(seg_prob, boxes: BoxSet, mask_threshold: float = 0.5,
                       min_area: int = 10) -> np.ndarray:
    """Cut the thresholded foreground into instances with the boxes.

    Foreground pixels inside boxes go to the highest-scoring box that covers
    them; the rest are grouped by 4-connectivity and kept when at least
    ``min_area`` pixels. Ids are consecutive from 1.
    """
    prob = seg_prob.detach().cpu().numpy() if isinstance(seg_prob, torch.Tensor) else np.asarray(seg_prob)
    fg = prob > mask_threshold
    labels = np.zeros(fg.shape, dtype=np.int32)
    order = np.argsort(-boxes.scores, kind="stable")
    next_id = 1
    for i in order:
        r0, c0, r1, c1 = boxes.boxes[i]
        window = labels[r0 : r1 + 1, c0 : c1 + 1]
        claim = fg[r0 : r1 + 1, c0 : c1 + 1] & (window == 0)
        if claim.any():
            window[claim] = next_id
            next_id += 1
    leftover = fg & (labels == 0)
    comps, n = ndimage.label(leftover)
    if n:
        areas = np.bincount(comps.ravel(), minlength=n + 1)
        kept = np.flatnonzero(areas[1:] >= min_area) + 1
        lut = np.zeros(n + 1, dtype=np.int32)
        lut[kept] = np.arange(next_id, next_id + len(kept), dtype=np.int32)
        relabeled = lut[comps]
        labels = np.where(relabeled > 0, relabeled, labels)
    return labels
