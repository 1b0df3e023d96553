"""Static figures from training logs and ablation summaries."""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..losses import COMPONENTS  # noqa: E402
from ..metrics import METRIC_NAMES  # noqa: E402
from .train import read_log  # noqa: E402

LOSS_FILE = "loss_components.png"
ALPHA_FILE = "alpha_trajectory.png"
ALPHA_NOTE = "alpha_trajectory.skipped.txt"
BLOCK_FILE = "chosen_blocks.png"
PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=100, metadata=PNG_META)
    plt.close(fig)
    return path


def epoch_means(records: list[dict], key: str) -> tuple[list[int], list[float]]:
    by_epoch = defaultdict(list)
    for rec in records:
        by_epoch[rec["epoch"]].append(rec[key])
    epochs = sorted(by_epoch)
    return epochs, [float(np.mean(by_epoch[e])) for e in epochs]


def plot_losses(records: list[dict], out_dir) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in COMPONENTS + ("total",):
        epochs, values = epoch_means(records, name)
        ax.plot(epochs, values, marker="o", label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.legend(fontsize=8)
    return _save(fig, Path(out_dir) / LOSS_FILE)


def alpha_series(records: list[dict]):
    """Per-epoch mean alpha_P and mean per-block alphas; None when nothing was logged."""
    chosen, blocks = defaultdict(list), defaultdict(list)
    for rec in records:
        for a_p, alphas in zip(rec.get("alpha_P") or [], rec.get("alphas") or []):
            if a_p is None:
                continue
            chosen[rec["epoch"]].append(a_p)
            blocks[rec["epoch"]].append([np.nan if a is None else a for a in alphas])
    if not chosen:
        return None
    epochs = sorted(chosen)
    alpha_p = [float(np.mean(chosen[e])) for e in epochs]
    per_block = np.array([np.nanmean(np.array(blocks[e], dtype=float), axis=0) for e in epochs])
    return epochs, alpha_p, per_block


def plot_alpha(records: list[dict], out_dir) -> Path:
    """Alpha trajectories, or a note file when the log carries no selections."""
    out_dir = Path(out_dir)
    series = alpha_series(records)
    if series is None:
        note = out_dir / ALPHA_NOTE
        note.write_text("alpha plot skipped: no alpha_P values in the log (CAM selection disabled)\n")
        return note
    epochs, alpha_p, per_block = series
    fig, ax = plt.subplots(figsize=(6, 4))
    for k in range(per_block.shape[1]):
        ax.plot(epochs, per_block[:, k], linestyle="--", label=f"block {k + 1}")
    ax.plot(epochs, alpha_p, color="black", marker="o", label="alpha_P (selected)")
    ax.set_xlabel("epoch")
    ax.set_ylabel("similarity rate")
    ax.legend(fontsize=8)
    return _save(fig, out_dir / ALPHA_FILE)


def block_counts(records: list[dict]) -> Counter:
    return Counter(b for rec in records for b in (rec.get("chosen_block") or []) if b is not None)


def plot_block_histogram(records: list[dict], out_dir) -> Path | None:
    counts = block_counts(records)
    if not counts:
        return None
    fig, ax = plt.subplots(figsize=(4, 3))
    blocks = [1, 2, 3, 4]
    ax.bar([str(b) for b in blocks], [counts.get(b, 0) for b in blocks])
    ax.set_xlabel("chosen block")
    ax.set_ylabel("selections")
    return _save(fig, Path(out_dir) / BLOCK_FILE)


def plot_ablation(table: dict[str, dict[str, float]], out_dir) -> list[Path]:
    """One bar chart per metric with a bar per variant (``ablation_<metric>.png``)."""
    out_dir = Path(out_dir)
    variants = list(table)
    paths = []
    for metric in METRIC_NAMES:
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.bar(variants, [table[v][metric] for v in variants])
        ax.set_ylabel(metric)
        ax.set_ylim(0, 1)
        paths.append(_save(fig, out_dir / f"ablation_{metric}.png"))
    return paths


def plot_run(log_dir, out_dir) -> list[Path]:
    """Every figure available for a run directory (or an ablation directory)."""
    log_dir = Path(log_dir)
    out_dir = Path(out_dir)
    log_path = log_dir / "train_log.jsonl"
    ablation_path = log_dir / "ablation.json"
    if not log_path.exists() and not ablation_path.exists():
        raise FileNotFoundError(f"no train_log.jsonl or ablation.json in {log_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    if log_path.exists():
        records = read_log(log_path)
        if not records:
            raise ValueError(f"{log_path} is empty")
        paths += [plot_losses(records, out_dir), plot_alpha(records, out_dir)]
        hist = plot_block_histogram(records, out_dir)
        if hist is not None:
            paths.append(hist)
    if ablation_path.exists():
        paths += plot_ablation(json.loads(ablation_path.read_text())["mean"], out_dir)
    return paths
