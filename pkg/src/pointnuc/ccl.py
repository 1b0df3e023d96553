"""CAM-guided pixel contrastive learning."""

from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .labels import BACKGROUND, FOREGROUND, as_values

logger = logging.getLogger(__name__)


class AnchorUnavailable(ValueError):
    """M lacks foreground or background pixels, so an anchor cannot be formed."""


class Projector(nn.Module):
    """Four 3x3 convs followed by a per-pixel three-layer MLP."""

    def __init__(self, in_channels, width=64, embed_dim=32):
        super().__init__()
        layers = []
        cin = in_channels
        for _ in range(4):
            layers += [nn.Conv2d(cin, width, 3, padding=1), nn.ReLU(inplace=True)]
            cin = width
        self.convs = nn.Sequential(*layers)
        self.mlp = nn.Sequential(
            nn.Conv2d(width, width, 1), nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 1), nn.ReLU(inplace=True),
            nn.Conv2d(width, embed_dim, 1),
        )

    def forward(self, features, size):
        z = self.mlp(self.convs(features))
        z = F.interpolate(z, size=tuple(size), mode="bilinear", align_corners=False)
        return F.normalize(z, dim=1).permute(0, 2, 3, 1)


def project_features(model, block_features, size) -> torch.Tensor:
    """Enhanced feature map Z, (N, H, W, D) with unit-norm pixel vectors."""
    return model.project(block_features, size)


def _unit(v: torch.Tensor) -> torch.Tensor:
    return v / v.norm().clamp_min(1e-12)


def compute_anchors(Z: torch.Tensor, M) -> tuple[torch.Tensor, torch.Tensor]:
    """Unit-normalized mean embeddings of M's foreground and background pixels.

    ``Z`` is (H, W, D); ignored pixels of M contribute to neither anchor.
    """
    m = torch.as_tensor(as_values(M), device=Z.device)
    fg = m == FOREGROUND
    bg = m == BACKGROUND
    if not fg.any() or not bg.any():
        raise AnchorUnavailable(
            f"initial label has {int(fg.sum())} foreground and {int(bg.sum())} background pixels"
        )
    return _unit(Z[fg].mean(0)), _unit(Z[bg].mean(0))


def sample_indices(P, K: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat pixel indices of up to ``K`` foreground and ``K`` background pixels of P."""
    if K < 1:
        raise ValueError("K must be >= 1")
    values = as_values(P).ravel()
    rng = np.random.default_rng(seed)
    out = []
    for cls in (FOREGROUND, BACKGROUND):
        idx = np.flatnonzero(values == cls)
        if len(idx) > K:
            idx = np.sort(rng.choice(idx, size=K, replace=False))
        out.append(idx)
    return out[0], out[1]


def sample_sets(Z: torch.Tensor, P, K: int, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample S+ from P's foreground and S- from P's background, without replacement."""
    pos, neg = sample_indices(P, K, seed)
    flat = Z.reshape(-1, Z.shape[-1])
    return flat[torch.as_tensor(pos, dtype=torch.long)], flat[torch.as_tensor(neg, dtype=torch.long)]


def contrastive_term(q: torch.Tensor, U: torch.Tensor, V: torch.Tensor, tau: float) -> torch.Tensor:
    """InfoNCE-style term: each u in U competes against all of V, averaged over U.

    ``q`` is (D,), ``U`` is (|U|, D) and ``V`` is (|V|, D); V may be empty.
    """
    if len(U) == 0:
        raise ValueError("contrastive term undefined for an empty positive set")
    if tau <= 0:
        raise ValueError("tau must be > 0")
    q = _unit(q)
    pos = F.normalize(U, dim=-1, eps=1e-12) @ q / tau  # (|U|,)
    if len(V):
        neg = F.normalize(V, dim=-1, eps=1e-12) @ q / tau
        logits = torch.cat([pos[:, None], neg[None, :].expand(len(pos), -1)], dim=1)
    else:
        logits = pos[:, None]
    return -(pos - torch.logsumexp(logits, dim=1)).mean()


def ccl_loss(Z: torch.Tensor, M, P, tau: float, alpha_P: float, K: int, seed: int) -> torch.Tensor:
    """``alpha_P * (L(a+, S+, S-) + L(a-, S-, S+))`` for one image; empty-U terms are 0."""
    zero = Z.sum() * 0.0
    try:
        a_pos, a_neg = compute_anchors(Z, M)
    except AnchorUnavailable as exc:
        logger.debug("skipping contrastive loss: %s", exc)
        return zero
    s_pos, s_neg = sample_sets(Z, P, K, seed)
    loss = zero
    if len(s_pos):
        loss = loss + contrastive_term(a_pos, s_pos, s_neg, tau)
    if len(s_neg):
        loss = loss + contrastive_term(a_neg, s_neg, s_pos, tau)
    return alpha_P * loss
