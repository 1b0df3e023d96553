"""Training loop, checkpointing and evaluation."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .. import ccl, dcs, instances, labels, losses, network
from ..data import ImageSample, load_dataset, load_split
from ..metrics import MetricsReport, evaluate_pair
from .config import TrainConfig

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "pointnuc.checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, message, component=None, step=None):
        super().__init__(message)
        self.component = component
        self.step = step


@dataclass
class TrainResult:
    out_dir: Path
    best_checkpoint: Path
    last_checkpoint: Path
    log_path: Path
    epochs: list[dict] = field(default_factory=list)
    seconds: float = 0.0


# ---------------------------------------------------------------------------
# setup
# ---------------------------------------------------------------------------

def configure_runtime(cfg: TrainConfig) -> None:
    torch.set_num_threads(max(1, cfg.num_threads))
    torch.use_deterministic_algorithms(cfg.deterministic)
    torch.manual_seed(cfg.seed)


def build_model(cfg: TrainConfig) -> network.PointSegNet:
    torch.manual_seed(cfg.seed)
    return network.PointSegNet(
        base_width=cfg.base_width,
        fpn_channels=cfg.fpn_channels,
        embed_dim=cfg.embed_dim,
        loc_grid=(cfg.loc_grid, cfg.loc_grid),
    )


def build_optimizer(cfg: TrainConfig, model) -> torch.optim.Optimizer:
    return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    arr = np.stack([np.ascontiguousarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _rot90(image, points, k):
    for _ in range(k % 4):
        W = image.shape[1]
        image = np.rot90(image)
        points = [(W - 1 - c, r) for r, c in points]
    return image, points


def augment(rng: np.random.Generator, image: np.ndarray, points, cfg: TrainConfig):
    """Random flips and 90-degree rotations, each applied with probability 0.5."""
    H, W = image.shape[:2]
    points = list(points)
    if cfg.augment_flip:
        if rng.random() < 0.5:
            image = image[:, ::-1]
            points = [(r, W - 1 - c) for r, c in points]
        if rng.random() < 0.5:
            image = image[::-1]
            points = [(H - 1 - r, c) for r, c in points]
    if cfg.augment_rotate and rng.random() < 0.5 and H == W:
        image, points = _rot90(image, points, int(rng.integers(1, 4)))
    return np.ascontiguousarray(image), points


def random_crop(rng, image, points, size):
    H, W = image.shape[:2]
    top = int(rng.integers(0, H - size + 1))
    left = int(rng.integers(0, W - size + 1))
    kept = [(r - top, c - left) for r, c in points if top <= r < top + size and left <= c < left + size]
    return image[top : top + size, left : left + size], kept


def make_batch(rng, samples: Sequence[ImageSample], cfg: TrainConfig):
    images, points = [], []
    for s in samples:
        im, pts = augment(rng, s.image, s.points, cfg)
        images.append(im)
        points.append(pts)
    H, W = images[0].shape[:2]
    # the crop decision is shared by the batch so that tensors stack
    if cfg.augment_crop and cfg.crop_size < min(H, W) and rng.random() < 0.5:
        cropped = [random_crop(rng, im, pts, cfg.crop_size) for im, pts in zip(images, points)]
        images = [c[0] for c in cropped]
        points = [c[1] for c in cropped]
    return to_tensor(images), points


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------

def _ccl_seed(cfg: TrainConfig, step: int, index: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, step, index]).generate_state(1)[0])


def compute_step_losses(model, images: torch.Tensor, points, cfg: TrainConfig, step: int,
                        active: bool, block_memory: dict | None = None, sample_ids=None):
    """Forward one batch and return (LossBreakdown, per-image selection results)."""
    N, _, H, W = images.shape
    out = model(images)
    Ms = [labels.build_initial_label(p, (H, W), cfg.r, cfg.d) for p in points]
    boxes = [labels.build_pseudo_boxes(p, cfg.pseudo_box_radius, (H, W)) for p in points]

    selections: list[dcs.SelectionResult | None] = [None] * N
    if cfg.enable_dcs or cfg.enable_ccl:
        cams = network.compute_cams(out.block_features, network.localization_objective(out.loc_heatmap), (H, W))
        cams = cams.numpy()
        refresh = step % cfg.cam_every == 0
        for b in range(N):
            if not Ms[b].omega.any():
                continue
            force = cfg.block_override
            sid = sample_ids[b] if sample_ids is not None else None
            if force is None and not refresh and block_memory is not None and sid in block_memory:
                force = block_memory[sid]
            selections[b] = dcs.select_pseudo_label(cams[b], Ms[b], cfg.theta, force_block=force,
                                                    keep_binarized=cfg.debug_dcs)
            if block_memory is not None and sid is not None and (refresh or sid not in block_memory):
                block_memory[sid] = selections[b].chosen_block

    Z = model.project(out.block_features, (H, W)) if cfg.enable_ccl else None
    zero = out.seg_prob.sum() * 0.0
    det_l, seg_l, loc_l, dcs_l, ccl_l = zero, zero, zero, zero, zero
    grid = tuple(out.loc_heatmap.shape[-2:])
    for b in range(N):
        det_l = det_l + losses.detection_loss([lv[b] for lv in out.det_outputs], boxes[b], cfg.det_assign)
        seg_l = seg_l + losses.seg_loss(out.seg_prob[b], Ms[b])
        target = losses.render_point_density(points[b], (H, W), grid, cfg.loc_sigma)
        loc_l = loc_l + losses.localization_loss(out.loc_heatmap[b], target)
        sel = selections[b]
        if sel is None:
            continue
        if cfg.enable_dcs:
            dcs_l = dcs_l + dcs.dcs_loss(out.seg_prob[b], sel.P, sel.alpha_P)
        if cfg.enable_ccl:
            ccl_l = ccl_l + ccl.ccl_loss(Z[b], Ms[b], sel.P, cfg.tau, sel.alpha_P, cfg.ccl_samples,
                                         _ccl_seed(cfg, step, b))
    omega1 = cfg.omega1 if (cfg.enable_dcs and active) else 0.0
    omega2 = cfg.omega2 if (cfg.enable_ccl and active) else 0.0
    breakdown = losses.total_loss(det_l / N, seg_l / N, loc_l / N, dcs_l / N, ccl_l / N, omega1, omega2)
    return breakdown, selections


def _record(epoch, step, breakdown, selections, sample_ids):
    rec = {"epoch": epoch, "step": step, **breakdown.as_record(), "sample_ids": list(sample_ids)}
    if any(s is not None for s in selections):
        rec["alpha_P"] = [None if s is None else s.alpha_P for s in selections]
        rec["chosen_block"] = [None if s is None else s.chosen_block for s in selections]
        rec["alphas"] = [None if s is None else s.alphas for s in selections]
    else:
        rec["alpha_P"] = None
        rec["chosen_block"] = None
        rec["alphas"] = None
    return rec


# ---------------------------------------------------------------------------
# inference and evaluation
# ---------------------------------------------------------------------------

def _pad_to(image: np.ndarray, multiple: int = 32) -> np.ndarray:
    H, W = image.shape[:2]
    ph = (-H) % multiple
    pw = (-W) % multiple
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return image


@torch.no_grad()
def predict_instances(model, image: np.ndarray, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """(instance mask, foreground probability) for one H x W x 3 image."""
    H, W = image.shape[:2]
    out = model(to_tensor([_pad_to(image)]))
    prob = out.seg_prob[0, :H, :W]
    boxes = instances.decode_boxes([lv[0] for lv in out.det_outputs], (H, W), cfg.score_threshold, cfg.nms_iou)
    inst = instances.assemble_instances(prob, boxes, cfg.mask_threshold, cfg.min_area)
    return inst, prob.numpy()


def evaluate_samples(model, samples: Sequence[ImageSample], cfg: TrainConfig, oracle: bool = False) -> MetricsReport:
    if not samples:
        raise ValueError("no samples")
    if model is not None:
        model.eval()
    rows = []
    for s in samples:
        pred = s.instance_mask if oracle else predict_instances(model, s.image, cfg)[0]
        rows.append({"sample_id": s.sample_id, **evaluate_pair(pred, s.instance_mask)})
    return MetricsReport.from_samples(rows)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model, cfg: TrainConfig, epoch: int, val: dict | None) -> None:
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": cfg.to_dict(),
            "config_hash": cfg.hash(),
            "epoch": epoch,
            "val_metrics": val,
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_checkpoint(path, expected: TrainConfig | None = None):
    """Load a checkpoint, refusing it when its configuration hash does not match."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {blob.get('version')}")
    cfg = TrainConfig.from_dict(blob["config"])
    if cfg.hash() != blob["config_hash"]:
        raise CheckpointError(f"{path}: stored config hash {blob['config_hash']} != recomputed {cfg.hash()}")
    if expected is not None and expected.hash() != cfg.hash():
        diff = {k: (v, getattr(expected, k)) for k, v in cfg.to_dict().items() if getattr(expected, k) != v}
        raise CheckpointError(f"{path}: config hash mismatch; differing keys (checkpoint, expected): {diff}")
    model = build_model(cfg)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, cfg, blob


def evaluate(checkpoint, split: str = "test", data_dir=None, oracle: bool = False,
             expected: TrainConfig | None = None) -> MetricsReport:
    model, cfg, _ = load_checkpoint(checkpoint, expected)
    if cfg.deterministic:
        configure_runtime(cfg)
    samples = load_split(data_dir or cfg.data_dir, split)
    if not samples:
        raise ValueError(f"no samples in split {split!r}")
    return evaluate_samples(model, samples, cfg, oracle=oracle)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def fit(cfg: TrainConfig, train_samples: Sequence[ImageSample], val_samples: Sequence[ImageSample],
        out_dir) -> TrainResult:
    """Train on in-memory samples, writing logs and checkpoints under ``out_dir``."""
    if not train_samples:
        raise ValueError("no training samples")
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.txt")
    configure_runtime(cfg)
    model = build_model(cfg)
    opt = build_optimizer(cfg, model)
    rng = np.random.default_rng(cfg.seed)
    log_path = out_dir / "train_log.jsonl"
    epoch_path = out_dir / "epochs.jsonl"
    block_memory: dict = {}
    started = time.perf_counter()
    step = 0
    best_pq = -math.inf
    best_path = ckpt_dir / "best.pt"
    epochs = []
    with open(log_path, "w") as log, open(epoch_path, "w") as elog:
        for epoch in range(cfg.epochs):
            model.train()
            active = epoch >= cfg.warmup_epochs
            order = rng.permutation(len(train_samples))
            alpha_values = []
            for start in range(0, len(order), cfg.batch_size):
                batch = [train_samples[i] for i in order[start : start + cfg.batch_size]]
                images, points = make_batch(rng, batch, cfg)
                ids = [s.sample_id for s in batch]
                try:
                    breakdown, selections = compute_step_losses(
                        model, images, points, cfg, step, active, block_memory, ids
                    )
                except losses.NonFiniteLossError as exc:
                    raise TrainingAborted(f"step {step}: {exc}", exc.component, step) from exc
                opt.zero_grad(set_to_none=True)
                breakdown.tensor.backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                opt.step()
                rec = _record(epoch, step, breakdown, selections, ids)
                log.write(json.dumps(rec) + "\n")
                if cfg.debug_dcs:
                    for sid, sel in zip(ids, selections):
                        if sel is not None:
                            dcs.dump_selection(out_dir / "debug" / "dcs", epoch, sid, sel)
                alpha_values += [a for a in (rec["alpha_P"] or []) if a is not None]
                step += 1
            val = evaluate_samples(model, val_samples, cfg).summary() if val_samples else None
            summary = {
                "epoch": epoch,
                "dcs_active": bool(active and cfg.enable_dcs),
                "mean_alpha_P": float(np.mean(alpha_values)) if alpha_values else None,
                "val": val,
                "seconds": time.perf_counter() - started,
            }
            elog.write(json.dumps(summary) + "\n")
            elog.flush()
            epochs.append(summary)
            logger.info("epoch %d: mean alpha_P=%s val=%s", epoch, summary["mean_alpha_P"], val)
            last_path = ckpt_dir / f"epoch_{epoch:03d}.pt"
            save_checkpoint(last_path, model, cfg, epoch, val)
            # without a validation split the last epoch is kept
            if val is None or val["pq"] > best_pq:
                best_pq = val["pq"] if val else best_pq
                save_checkpoint(best_path, model, cfg, epoch, val)
    return TrainResult(out_dir, best_path, last_path, log_path, epochs, time.perf_counter() - started)


def train(cfg: TrainConfig, out_dir) -> TrainResult:
    """Validate the dataset on disk, then train."""
    if not cfg.data_dir:
        raise ValueError("config.data_dir is required")
    manifests = load_dataset(cfg.data_dir)
    if cfg.train_split not in manifests:
        raise ValueError(f"dataset has no split {cfg.train_split!r}")
    train_samples = load_split(cfg.data_dir, cfg.train_split)
    val_samples = load_split(cfg.data_dir, cfg.val_split) if cfg.val_split in manifests else []
    return fit(cfg, train_samples, val_samples, out_dir)


def read_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
