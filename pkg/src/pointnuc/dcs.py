"""Dynamic CAM selection: binarize each block's CAM, score it against M, keep the best."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from .labels import BACKGROUND, FOREGROUND, IGNORED, MaskKind, TriMask, as_values
from .losses import masked_bce

logger = logging.getLogger(__name__)


class UndefinedRateError(ValueError):
    """The initial label has no non-ignored pixels, so the similarity rate is undefined."""


@dataclass
class SelectionResult:
    P: TriMask
    alpha_P: float
    chosen_block: int  # 1-based
    alphas: list[float]
    binarized: list[TriMask] | None = None


def binarize_cam(cam: np.ndarray, theta: float = 0.8) -> TriMask:
    """Foreground above ``theta``, background at or below ``1 - theta``, ignored between."""
    if not 0.5 < theta <= 1.0:
        raise ValueError(f"theta must lie in (0.5, 1], got {theta}")
    cam = np.asarray(cam)
    values = np.full(cam.shape, IGNORED, dtype=np.uint8)
    values[cam > theta] = FOREGROUND
    values[cam <= 1.0 - theta] = BACKGROUND
    return TriMask(values, MaskKind.BINARIZED_C)


def similarity_counts(C, M) -> tuple[int, int]:
    """(matching pixels, |Omega_M|); pixels ignored in C match neither class."""
    c, m = as_values(C), as_values(M)
    if c.shape != m.shape:
        raise ValueError(f"shape mismatch {c.shape} vs {m.shape}")
    omega = m != IGNORED
    matches = np.count_nonzero(omega & (c == m))
    return int(matches), int(np.count_nonzero(omega))


def similarity_rate(C, M) -> float:
    matches, omega = similarity_counts(C, M)
    if omega == 0:
        raise UndefinedRateError("initial label has no non-ignored pixels")
    return matches / omega


def similarity_fraction(C, M) -> Fraction:
    matches, omega = similarity_counts(C, M)
    if omega == 0:
        raise UndefinedRateError("initial label has no non-ignored pixels")
    return Fraction(matches, omega)


def select_pseudo_label(cams, M, theta: float = 0.8, force_block: int | None = None,
                        keep_binarized: bool = False) -> SelectionResult:
    """Pick the binarized CAM with the highest similarity rate as P.

    Ties go to the shallowest block. ``force_block`` (1-based) bypasses the
    argmax and reports that block's own rate.
    """
    maps = cams.cams if hasattr(cams, "cams") else cams
    binarized = [binarize_cam(np.asarray(cam), theta) for cam in maps]
    counts = [similarity_counts(C, M) for C in binarized]
    omega = counts[0][1]
    if omega == 0:
        raise UndefinedRateError("initial label has no non-ignored pixels")
    alphas = [m / omega for m, _ in counts]
    if force_block is None:
        # integer matches compare exactly; index() returns the first (shallowest) max
        best = [m for m, _ in counts]
        idx = best.index(max(best))
    else:
        if not 1 <= force_block <= len(binarized):
            raise ValueError(f"force_block must be in 1..{len(binarized)}")
        idx = force_block - 1
    P = TriMask(binarized[idx].values, MaskKind.OPTIMIZED_P)
    return SelectionResult(P, alphas[idx], idx + 1, alphas, binarized if keep_binarized else None)


def dcs_loss(Y: torch.Tensor, P, alpha_P: float) -> torch.Tensor:
    """Rate-weighted masked BCE of prediction ``Y`` (H, W) against P over its non-ignored pixels."""
    p = torch.as_tensor(as_values(P), device=Y.device)
    omega = p != IGNORED
    if not omega.any():
        logger.warning("optimized label has no non-ignored pixels; dcs loss set to 0")
        return Y.sum() * 0.0
    return alpha_P * masked_bce(Y, (p == FOREGROUND).to(Y.dtype), omega)


def dump_selection(directory, epoch: int, sample_id: str, result: SelectionResult) -> None:
    """Write the binarized maps and P as TriMask PNGs plus the rates as JSON."""
    out = Path(directory) / f"epoch{epoch:03d}"
    out.mkdir(parents=True, exist_ok=True)
    for k, C in enumerate(result.binarized or [], start=1):
        C.save(out / f"{sample_id}.block{k}.png")
    result.P.save(out / f"{sample_id}.P.png")
    (out / f"{sample_id}.json").write_text(json.dumps(
        {"alphas": result.alphas, "alpha_P": result.alpha_P, "chosen_block": result.chosen_block}
    ))
