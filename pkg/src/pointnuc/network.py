"""Desk-scale decoupled detection / segmentation network and per-block CAMs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .ccl import Projector

ENCODER_STRIDES = (4, 8, 16, 32)
DET_STRIDES = (8, 16, 32)


@dataclass
class DetLevel:
    stride: int
    cls_logits: torch.Tensor  # (N, 1, h, w)
    box: torch.Tensor  # (N, 4, h, w) distances (left, top, right, bottom) in pixels
    ctr_logits: torch.Tensor  # (N, 1, h, w)

    def __getitem__(self, idx) -> "DetLevel":
        """Slice the batch dimension."""
        return DetLevel(self.stride, self.cls_logits[idx], self.box[idx], self.ctr_logits[idx])


@dataclass
class ModelOutputs:
    seg_logits: torch.Tensor  # (N, H, W)
    seg_prob: torch.Tensor  # (N, H, W)
    det_outputs: list[DetLevel]
    loc_heatmap: torch.Tensor  # (N, gh, gw), >= 0
    block_features: list[torch.Tensor]  # 4 x (N, C_k, H_k, W_k)


@dataclass
class CamStack:
    cams: np.ndarray  # (4, H, W) in [0, 1]
    source_block: tuple[int, ...] = (1, 2, 3, 4)

    def __len__(self) -> int:
        return len(self.cams)


def _groups(channels: int) -> int:
    return max(1, min(8, channels // 4))


class ConvGN(nn.Sequential):
    def __init__(self, cin, cout, stride=1):
        super().__init__(
            nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
            nn.GroupNorm(_groups(cout), cout),
            nn.ReLU(inplace=True),
        )


class ResBlock(nn.Module):
    """Two-conv residual block that halves resolution."""

    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = ConvGN(cin, cout, stride=2)
        self.conv2 = nn.Sequential(
            nn.Conv2d(cout, cout, 3, padding=1, bias=False), nn.GroupNorm(_groups(cout), cout)
        )
        self.shortcut = nn.Sequential(
            nn.Conv2d(cin, cout, 1, stride=2, bias=False), nn.GroupNorm(_groups(cout), cout)
        )

    def forward(self, x):
        return F.relu(self.conv2(self.conv1(x)) + self.shortcut(x))


class Encoder(nn.Module):
    def __init__(self, base_width=16):
        super().__init__()
        widths = [base_width * m for m in (1, 2, 4, 8)]
        self.widths = widths
        self.stem = ConvGN(3, base_width, stride=2)
        self.blocks = nn.ModuleList(
            ResBlock(cin, cout) for cin, cout in zip([base_width] + widths[:-1], widths)
        )

    def forward(self, x) -> list[torch.Tensor]:
        x = self.stem(x)
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats


class FPN(nn.Module):
    def __init__(self, in_channels: Sequence[int], channels: int):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, channels, 1) for c in in_channels)
        self.smooth = nn.ModuleList(nn.Conv2d(channels, channels, 3, padding=1) for _ in in_channels)

    def forward(self, feats):
        laterals = [lat(f) for lat, f in zip(self.lateral, feats)]
        for i in range(len(laterals) - 2, -1, -1):
            laterals[i] = laterals[i] + F.interpolate(laterals[i + 1], size=laterals[i].shape[-2:], mode="nearest")
        return [sm(x) for sm, x in zip(self.smooth, laterals)]


class Scale(nn.Module):
    def __init__(self, init=1.0):
        super().__init__()
        self.scale = nn.Parameter(torch.tensor(float(init)))

    def forward(self, x):
        return x * self.scale


class DetectionHead(nn.Module):
    """FCOS-style head shared across pyramid levels."""

    def __init__(self, channels, strides=DET_STRIDES, prior=0.01):
        super().__init__()
        self.strides = tuple(strides)
        self.tower = nn.Sequential(ConvGN(channels, channels), ConvGN(channels, channels))
        self.cls = nn.Conv2d(channels, 1, 3, padding=1)
        self.reg = nn.Conv2d(channels, 4, 3, padding=1)
        self.ctr = nn.Conv2d(channels, 1, 3, padding=1)
        self.scales = nn.ModuleList(Scale() for _ in self.strides)
        for conv in (self.cls, self.reg, self.ctr):
            nn.init.normal_(conv.weight, std=0.01)
            nn.init.zeros_(conv.bias)
        nn.init.constant_(self.cls.bias, -float(np.log((1 - prior) / prior)))

    def forward(self, feats) -> list[DetLevel]:
        out = []
        for stride, scale, f in zip(self.strides, self.scales, feats):
            t = self.tower(f)
            box = F.softplus(scale(self.reg(t))) * stride
            out.append(DetLevel(stride, self.cls(t), box, self.ctr(t)))
        return out


class SegmentationHead(nn.Module):
    """Four conv layers over the fused pyramid; the last one emits one logit."""

    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(ConvGN(channels, channels), ConvGN(channels, channels), ConvGN(channels, channels))
        self.out = nn.Conv2d(channels, 1, 3, padding=1)

    def forward(self, pyramid, size):
        base = pyramid[0]
        fused = base
        for p in pyramid[1:]:
            fused = fused + F.interpolate(p, size=base.shape[-2:], mode="bilinear", align_corners=False)
        logits = self.out(self.body(fused))
        return F.interpolate(logits, size=size, mode="bilinear", align_corners=False)[:, 0]


class LocalizationHead(nn.Module):
    """Three fully connected layers regressing a coarse point-density grid.

    The final block is pooled to ``grid`` cells and the layers are shared
    across cells, each cell regressing its own density from its own feature.
    """

    def __init__(self, channels, grid=(4, 4), hidden=128):
        super().__init__()
        self.grid = tuple(grid)
        self.pool = nn.AdaptiveAvgPool2d(self.grid)
        self.fc = nn.Sequential(
            nn.Linear(channels, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, 1),
        )

    def forward(self, x):
        cells = self.pool(x).permute(0, 2, 3, 1)  # (N, gh, gw, C)
        return F.softplus(self.fc(cells)[..., 0])


class PointSegNet(nn.Module):
    def __init__(self, base_width=16, fpn_channels=32, embed_dim=32, loc_grid=(4, 4),
                 det_strides=DET_STRIDES, projector_width=64):
        super().__init__()
        self.encoder = Encoder(base_width)
        self.fpn = FPN(self.encoder.widths, fpn_channels)
        self.seg_head = SegmentationHead(fpn_channels)
        self.det_head = DetectionHead(fpn_channels, det_strides)
        self.loc_head = LocalizationHead(self.encoder.widths[-1], loc_grid)
        self.projector = Projector(self.encoder.widths[-1], projector_width, embed_dim)
        self._det_levels = [ENCODER_STRIDES.index(s) for s in det_strides]

    def forward(self, image: torch.Tensor) -> ModelOutputs:
        """``image`` is (N, 3, H, W) in [0, 1] with H, W divisible by 32."""
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) input, got {tuple(image.shape)}")
        H, W = image.shape[-2:]
        if H % 32 or W % 32:
            raise ValueError(f"input size {H}x{W} must be divisible by 32")
        feats = self.encoder(image - 0.5)
        pyramid = self.fpn(feats)
        seg_logits = self.seg_head(pyramid, (H, W))
        det = self.det_head([pyramid[i] for i in self._det_levels])
        loc = self.loc_head(feats[-1])
        return ModelOutputs(seg_logits, torch.sigmoid(seg_logits), det, loc, feats)

    def project(self, block_features, size) -> torch.Tensor:
        """Enhanced feature map Z as (N, H, W, D) unit vectors."""
        return self.projector(block_features[-1], size)

    def zero_init_outputs(self) -> None:
        """Zero the final layer of every head (seg logit 0 -> probability 0.5)."""
        for conv in (self.seg_head.out, self.det_head.cls, self.det_head.reg, self.det_head.ctr):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)
        nn.init.zeros_(self.loc_head.fc[-1].weight)
        nn.init.zeros_(self.loc_head.fc[-1].bias)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def normalize_minmax(raw: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Per-map min-max normalization over the last two dims; constant maps become 0."""
    flat = raw.flatten(-2)
    lo = flat.min(-1).values[..., None, None]
    hi = flat.max(-1).values[..., None, None]
    span = hi - lo
    return torch.where(span > eps, (raw - lo) / span.clamp_min(eps), torch.zeros_like(raw))


def cam_from_gradients(features: torch.Tensor, grads: torch.Tensor, size=None) -> torch.Tensor:
    """Gradient-weighted activation map for one block.

    ``features`` and ``grads`` are (N, C, h, w). Channel weights are the spatial
    mean of the gradient; the rectified weighted sum is bilinearly resized to
    ``size`` and min-max normalized per image. Returns (N, H, W).
    """
    weights = grads.mean(dim=(-2, -1), keepdim=True)
    raw = F.relu((weights * features).sum(1, keepdim=True))
    if size is not None and tuple(raw.shape[-2:]) != tuple(size):
        raw = F.interpolate(raw, size=tuple(size), mode="bilinear", align_corners=False)
    return normalize_minmax(raw[:, 0])


def compute_cams(block_features: Sequence[torch.Tensor], objective: torch.Tensor, size) -> torch.Tensor:
    """CAMs for every encoder block against a scalar objective.

    The graph is retained so the caller can still backpropagate the training
    loss. Returns a detached (N, n_blocks, H, W) tensor in [0, 1].
    """
    grads = torch.autograd.grad(objective, list(block_features), retain_graph=True, allow_unused=True)
    cams = []
    for feat, grad in zip(block_features, grads):
        if grad is None:
            grad = torch.zeros_like(feat)
        cams.append(cam_from_gradients(feat.detach(), grad.detach(), size))
    return torch.stack(cams, dim=1)


def localization_objective(loc_heatmap: torch.Tensor) -> torch.Tensor:
    """Scalar driving the CAMs: the total predicted point density (nuclei count)."""
    return loc_heatmap.sum()
