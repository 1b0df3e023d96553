"""Semantic and instance segmentation metrics (DICE, AJI, DQ/SQ/PQ)."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

METRIC_NAMES = ("dice", "aji", "dq", "sq", "pq")


def dice(pred_fg: np.ndarray, gt_fg: np.ndarray) -> float:
    """Semantic-foreground DICE; 1 when both masks are empty."""
    a = np.asarray(pred_fg, dtype=bool)
    b = np.asarray(gt_fg, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / total


def _contingency(pred: np.ndarray, gt: np.ndarray):
    """Intersection counts between every GT and predicted instance, ids ascending."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    g_ids, g_inv = np.unique(gt, return_inverse=True)
    p_ids, p_inv = np.unique(pred, return_inverse=True)
    joint = np.bincount(g_inv.ravel() * len(p_ids) + p_inv.ravel(), minlength=len(g_ids) * len(p_ids))
    joint = joint.reshape(len(g_ids), len(p_ids))
    g_fg = g_ids != 0
    p_fg = p_ids != 0
    inter = joint[np.ix_(g_fg, p_fg)]
    g_area = joint[g_fg].sum(1)
    p_area = joint[:, p_fg].sum(0)
    return inter, g_area, p_area


def aji(pred: np.ndarray, gt: np.ndarray) -> float:
    """Aggregated Jaccard Index with each prediction used at most once.

    GT instances are visited in ascending id order; each takes the unused
    prediction with the largest IoU (lowest id on ties).
    """
    inter, g_area, p_area = _contingency(pred, gt)
    if len(g_area) == 0 and len(p_area) == 0:
        return 1.0
    union = g_area[:, None] + p_area[None, :] - inter
    iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    used = np.zeros(len(p_area), dtype=bool)
    C = 0
    U = 0
    for g in range(len(g_area)):
        cand = np.where(used | (inter[g] == 0), -1.0, iou[g])
        j = int(np.argmax(cand)) if len(cand) else -1
        if j < 0 or cand[j] <= 0:
            U += int(g_area[g])
            continue
        C += int(inter[g, j])
        U += int(union[g, j])
        used[j] = True
    U += int(p_area[~used].sum())
    return C / U if U else 1.0


def panoptic(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float, float]:
    """(DQ, SQ, PQ) with matches at IoU > 0.5."""
    inter, g_area, p_area = _contingency(pred, gt)
    if len(g_area) == 0 and len(p_area) == 0:
        return 1.0, 1.0, 1.0
    union = g_area[:, None] + p_area[None, :] - inter
    iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    matched = iou > 0.5
    tp = int(matched.sum())
    fp = len(p_area) - tp
    fn = len(g_area) - tp
    dq = tp / (tp + 0.5 * fp + 0.5 * fn)
    sq = float(iou[matched].sum()) / tp if tp else 0.0
    return dq, sq, dq * sq


def evaluate_pair(pred: np.ndarray, gt: np.ndarray) -> dict[str, float]:
    dq, sq, pq = panoptic(pred, gt)
    return {
        "dice": dice(np.asarray(pred) > 0, np.asarray(gt) > 0),
        "aji": aji(pred, gt),
        "dq": dq,
        "sq": sq,
        "pq": pq,
    }


@dataclass
class MetricsReport:
    dice: float
    aji: float
    dq: float
    sq: float
    pq: float
    per_sample: list[dict] = field(default_factory=list)
    n_samples: int = 0

    @classmethod
    def from_samples(cls, per_sample: Sequence[dict]) -> "MetricsReport":
        """Aggregate per-sample dicts (each with a ``sample_id`` and the five metrics) by plain mean."""
        if not per_sample:
            raise ValueError("no samples")
        means = {k: float(np.mean([s[k] for s in per_sample])) for k in METRIC_NAMES}
        return cls(**means, per_sample=list(per_sample), n_samples=len(per_sample))

    def summary(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}

    def to_json(self) -> str:
        doc = {
            "aggregate": self.summary(),
            "dice_kind": "semantic_foreground",
            "n_samples": self.n_samples,
            "per_sample": self.per_sample,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("sample_id",) + METRIC_NAMES)
        for s in self.per_sample:
            writer.writerow([s.get("sample_id", "")] + [repr(float(s[k])) for k in METRIC_NAMES])
        return buf.getvalue()

    def write(self, path) -> None:
        """Write ``<path>`` as JSON and a sibling ``.csv`` with one row per sample."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        path.with_suffix(".csv").write_text(self.to_csv())

    @classmethod
    def read(cls, path) -> "MetricsReport":
        doc = json.loads(Path(path).read_text())
        return cls(**doc["aggregate"], per_sample=doc["per_sample"], n_samples=doc["n_samples"])
