"""Fixed-block vs dynamic CAM selection ablation and a k-fold driver."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..data import load_split
from ..metrics import METRIC_NAMES, MetricsReport
from .config import DYNAMIC, TrainConfig
from .train import evaluate, evaluate_samples, fit, load_checkpoint, train

VARIANTS = ("1", "2", "3", "4", DYNAMIC)


@dataclass
class AblationResult:
    # variant -> one test report per seed
    reports: dict[str, list[MetricsReport]]
    seeds: tuple[int, ...]

    def mean(self, variant: str, metric: str = "pq") -> float:
        return float(np.mean([getattr(r, metric) for r in self.reports[variant]]))

    def table(self) -> dict[str, dict[str, float]]:
        return {v: {m: self.mean(v, m) for m in METRIC_NAMES} for v in self.reports}

    def dynamic_margin(self, metric: str = "pq") -> float:
        """Dynamic mean minus the best fixed-block mean (positive means dynamic wins)."""
        fixed = [self.mean(v, metric) for v in self.reports if v != DYNAMIC]
        return self.mean(DYNAMIC, metric) - max(fixed)


def variant_label(variant: str) -> str:
    return DYNAMIC if variant == DYNAMIC else f"block{variant}"


def ablate_blocks(cfg: TrainConfig, out_dir, seeds: Sequence[int] = (0,), split: str = "test",
                  variants: Sequence[str] = VARIANTS) -> AblationResult:
    """Train one run per (variant, seed) and evaluate its best checkpoint on ``split``.

    Reports land in ``out_dir/<label>/seed<k>/report.json`` and a summary in
    ``out_dir/ablation.json``.
    """
    out_dir = Path(out_dir)
    reports: dict[str, list[MetricsReport]] = {}
    for variant in variants:
        for seed in seeds:
            run_cfg = cfg.replace(cam_block_override=variant, seed=int(seed))
            run_dir = out_dir / variant_label(variant) / f"seed{seed}"
            result = train(run_cfg, run_dir)
            report = evaluate(result.best_checkpoint, split)
            report.write(run_dir / "report.json")
            reports.setdefault(variant, []).append(report)
    result = AblationResult(reports, tuple(int(s) for s in seeds))
    summary = {
        "seeds": list(result.seeds),
        "split": split,
        "mean": {variant_label(v): row for v, row in result.table().items()},
    }
    if DYNAMIC in reports and len(reports) > 1:
        summary["dynamic_pq_margin"] = result.dynamic_margin("pq")
    (out_dir / "ablation.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return result


def fold_indices(n: int, k: int, seed: int = 0) -> list[np.ndarray]:
    """Shuffled, near-equal folds covering ``range(n)``."""
    if not 2 <= k <= n:
        raise ValueError(f"need 2 <= k <= n, got k={k}, n={n}")
    order = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(order, k)]


def cross_validate(cfg: TrainConfig, out_dir, k: int = 5, splits: Sequence[str] = ("train", "val", "test")
                   ) -> dict[str, tuple[float, float]]:
    """Pool ``splits``, train on k-1 folds, test on the held-out fold.

    Returns metric -> (mean, std) over folds. No validation split is used
    inside a fold, so each fold keeps its last checkpoint.
    """
    pool = [s for name in splits for s in load_split(cfg.data_dir, name)]
    folds = fold_indices(len(pool), k, cfg.seed)
    out_dir = Path(out_dir)
    rows = []
    for i, held in enumerate(folds):
        held_set = set(held.tolist())
        train_samples = [s for j, s in enumerate(pool) if j not in held_set]
        test_samples = [pool[j] for j in held]
        result = fit(cfg, train_samples, [], out_dir / f"fold{i}")
        model, run_cfg, _ = load_checkpoint(result.best_checkpoint, cfg)
        report = evaluate_samples(model, test_samples, run_cfg)
        report.write(out_dir / f"fold{i}" / "report.json")
        rows.append(report.summary())
    stats = {m: (float(np.mean([r[m] for r in rows])), float(np.std([r[m] for r in rows]))) for m in METRIC_NAMES}
    (out_dir / "cross_validation.json").write_text(
        json.dumps({m: {"mean": a, "std": b} for m, (a, b) in stats.items()}, indent=2, sort_keys=True)
    )
    return stats
