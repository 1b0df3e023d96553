"""Supervised objectives and their weighted composition."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import ndtr

from .labels import FOREGROUND, IGNORED, BoxSet, as_values

EPS = 1e-7
FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
DEFAULT_RANGES = ((0.0, 64.0), (64.0, 128.0), (128.0, math.inf))


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite {component} loss: {value}")
        self.component = component
        self.value = value


def masked_bce(Y: torch.Tensor, target: torch.Tensor, omega: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy of probabilities ``Y`` over the pixels in ``omega``."""
    n = omega.sum()
    if n == 0:
        return Y.sum() * 0.0
    y = Y.clamp(EPS, 1.0 - EPS)
    ll = target * torch.log(y) + (1.0 - target) * torch.log1p(-y)
    return -(ll * omega).sum() / n


def seg_loss(Y: torch.Tensor, M) -> torch.Tensor:
    """Masked BCE of the segmentation prediction (H, W) against the initial label."""
    m = torch.as_tensor(as_values(M), device=Y.device)
    if tuple(m.shape) != tuple(Y.shape):
        raise ValueError(f"shape mismatch {tuple(Y.shape)} vs {tuple(m.shape)}")
    return masked_bce(Y, (m == FOREGROUND).to(Y.dtype), m != IGNORED)


# ---------------------------------------------------------------------------
# detection
# ---------------------------------------------------------------------------

def level_locations(shape: Sequence[int], stride: int, dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    """Continuous (y, x) image coordinates of cell centres; pixel r spans [r, r + 1)."""
    h, w = shape
    ys = torch.arange(h, dtype=dtype) * stride + stride / 2.0
    xs = torch.arange(w, dtype=dtype) * stride + stride / 2.0
    return torch.meshgrid(ys, xs, indexing="ij")


@dataclass
class LevelTargets:
    positive: torch.Tensor  # (h, w) bool
    box: torch.Tensor  # (4, h, w) left, top, right, bottom
    centerness: torch.Tensor  # (h, w)


def centerness_target(box: torch.Tensor) -> torch.Tensor:
    l, t, r, b = box
    lr = torch.minimum(l, r) / torch.maximum(l, r).clamp_min(1e-12)
    tb = torch.minimum(t, b) / torch.maximum(t, b).clamp_min(1e-12)
    return torch.sqrt((lr * tb).clamp_min(0.0))


def detection_targets(shapes: Sequence[Sequence[int]], strides: Sequence[int], boxes: BoxSet,
                      assign: str = "stride8", ranges=DEFAULT_RANGES) -> list[LevelTargets]:
    """FCOS-style location assignment; a location inside several boxes takes the smallest.

    ``assign="stride8"`` puts every box on the stride-8 level; ``"ranges"`` uses
    the usual per-level ranges on the largest regression distance.
    """
    gt = torch.as_tensor(boxes.boxes, dtype=torch.float64)
    top, left = gt[:, 0], gt[:, 1]
    bottom, right = gt[:, 2] + 1.0, gt[:, 3] + 1.0
    areas = (bottom - top) * (right - left)
    out = []
    for level, (shape, stride) in enumerate(zip(shapes, strides)):
        h, w = shape
        ys, xs = level_locations(shape, stride)
        positive = torch.zeros(h, w, dtype=torch.bool)
        box_t = torch.zeros(4, h, w, dtype=torch.float64)
        if len(gt):
            l = xs[..., None] - left
            t = ys[..., None] - top
            r = right - xs[..., None]
            b = bottom - ys[..., None]
            dist = torch.stack([l, t, r, b], dim=0)  # (4, h, w, n)
            inside = dist.min(0).values > 0
            if assign == "stride8":
                if stride != 8:
                    inside = torch.zeros_like(inside)
            elif assign == "ranges":
                lo, hi = ranges[level]
                reach = dist.max(0).values
                inside &= (reach >= lo) & (reach <= hi)
            else:
                raise ValueError(f"unknown assignment {assign!r}")
            cost = torch.where(inside, areas.expand_as(inside), torch.full_like(l, math.inf))
            best_cost, best = cost.min(-1)
            positive = torch.isfinite(best_cost)
            box_t = torch.gather(dist, 3, best[None, ..., None].expand(4, h, w, 1))[..., 0]
        ctr = torch.where(positive, centerness_target(box_t), torch.zeros(h, w, dtype=torch.float64))
        out.append(LevelTargets(positive, box_t, ctr))
    return out


def focal_loss(logits: torch.Tensor, targets: torch.Tensor, gamma=FOCAL_GAMMA, alpha=FOCAL_ALPHA) -> torch.Tensor:
    """Summed sigmoid focal loss."""
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    return (alpha_t * (1 - p_t) ** gamma * ce).sum()


def iou_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Summed ``1 - IoU`` for (n, 4) left/top/right/bottom distances around shared points."""
    pl, pt, pr, pb = pred.unbind(-1)
    tl, tt, tr, tb = target.unbind(-1)
    area_p = (pl + pr) * (pt + pb)
    area_t = (tl + tr) * (tt + tb)
    inter = (torch.minimum(pl, tl) + torch.minimum(pr, tr)) * (torch.minimum(pt, tt) + torch.minimum(pb, tb))
    union = area_p + area_t - inter
    return (1.0 - inter / union.clamp_min(1e-12)).sum()


def _binary_entropy(t: torch.Tensor) -> torch.Tensor:
    return -(torch.xlogy(t, t) + torch.xlogy(1 - t, 1 - t))


def centerness_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Summed BCE minus the target entropy, so a perfect prediction scores exactly 0."""
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    return (ce - _binary_entropy(targets)).clamp_min(0.0).sum()


def detection_loss_terms(det_outputs, boxes: BoxSet, assign: str = "stride8") -> dict[str, torch.Tensor]:
    """Per-image detection terms; ``det_outputs`` hold unbatched (C, h, w) maps."""
    shapes = [tuple(level.cls_logits.shape[-2:]) for level in det_outputs]
    strides = [level.stride for level in det_outputs]
    targets = detection_targets(shapes, strides, boxes, assign)
    ref = det_outputs[0].cls_logits
    cls = ref.sum() * 0.0
    reg = ref.sum() * 0.0
    ctr = ref.sum() * 0.0
    n_pos = 0
    for level, tgt in zip(det_outputs, targets):
        dtype = level.cls_logits.dtype
        pos = tgt.positive
        cls = cls + focal_loss(level.cls_logits.reshape(pos.shape), pos.to(dtype))
        n = int(pos.sum())
        if n:
            n_pos += n
            pred_box = level.box.reshape(4, *pos.shape)[:, pos].T
            reg = reg + iou_loss(pred_box, tgt.box[:, pos].T.to(dtype))
            ctr = ctr + centerness_loss(level.ctr_logits.reshape(pos.shape)[pos], tgt.centerness[pos].to(dtype))
    norm = max(n_pos, 1)
    return {"cls": cls / norm, "reg": reg / norm, "ctr": ctr / norm, "n_pos": n_pos}


def detection_loss(det_outputs, boxes: BoxSet, assign: str = "stride8") -> torch.Tensor:
    terms = detection_loss_terms(det_outputs, boxes, assign)
    return terms["cls"] + terms["reg"] + terms["ctr"]


# ---------------------------------------------------------------------------
# localization
# ---------------------------------------------------------------------------

def render_point_density(points, image_size: Sequence[int], grid: Sequence[int], sigma: float = 2.0) -> np.ndarray:
    """Point-density target on a coarse grid.

    Each point contributes a unit-mass Gaussian (``sigma`` in image pixels)
    centred on its pixel; a cell holds the exact mass falling inside it, so the
    grid sums to the nuclei count (minus mass spilling over the border).
    """
    H, W = image_size
    gh, gw = grid
    out = np.zeros((gh, gw), dtype=np.float64)
    row_edges = np.linspace(0.0, H, gh + 1)
    col_edges = np.linspace(0.0, W, gw + 1)
    for r, c in points:
        mr = np.diff(ndtr((row_edges - (r + 0.5)) / sigma))
        mc = np.diff(ndtr((col_edges - (c + 0.5)) / sigma))
        out += np.outer(mr, mc)
    return out


def localization_loss(loc_heatmap: torch.Tensor, target) -> torch.Tensor:
    """Mean squared error against a rendered density target of the same grid shape."""
    target = torch.as_tensor(target, dtype=loc_heatmap.dtype, device=loc_heatmap.device)
    if target.shape != loc_heatmap.shape:
        raise ValueError(f"heatmap {tuple(loc_heatmap.shape)} vs target {tuple(target.shape)}")
    return ((loc_heatmap - target) ** 2).mean()


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------

COMPONENTS = ("l_det", "l_seg", "l_loc", "l_dcs", "l_ccl")


@dataclass
class LossBreakdown:
    l_det: float
    l_seg: float
    l_loc: float
    l_dcs: float
    l_ccl: float
    omega1: float
    omega2: float
    total: float
    tensor: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def as_record(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "tensor"}


def _scalar(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def total_loss(l_det, l_seg, l_loc, l_dcs, l_ccl, omega1: float = 0.5, omega2: float = 2.0) -> LossBreakdown:
    """``l_det + l_seg + l_loc + omega1 * l_dcs + omega2 * l_ccl``.

    ``total`` is recomputed from the float components in that fixed order, so a
    reader of the log can reproduce it bit for bit; ``tensor`` carries the
    differentiable sum when the inputs are tensors.
    """
    parts = dict(zip(COMPONENTS, (l_det, l_seg, l_loc, l_dcs, l_ccl)))
    values = {}
    for name, value in parts.items():
        v = _scalar(value)
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)
        values[name] = v
    total = values["l_det"] + values["l_seg"] + values["l_loc"] + omega1 * values["l_dcs"] + omega2 * values["l_ccl"]
    tensor = None
    if any(isinstance(v, torch.Tensor) for v in parts.values()):
        tensor = l_det + l_seg + l_loc + omega1 * l_dcs + omega2 * l_ccl
    return LossBreakdown(**values, omega1=float(omega1), omega2=float(omega2), total=total, tensor=tensor)
