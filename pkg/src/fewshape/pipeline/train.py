"""End-to-end training loop with per-epoch validation."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..config import RunConfig
from ..criterion import LossWeights, compute_losses
from ..numerics import tensor as T
from ..numerics.optim import AdamW, NonFiniteGradient
from ..sampler import foreground_masks, make_score_targets
from .evaluate import EvalReport, evaluate
from .infer import infer, save_model
from .model import Detector
from .synth import SceneConfig, SyntheticScene, generate_split, read_dataset

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "step", "lr", "L_class", "L_det", "L_fs", "L_total")


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, reason: str, checkpoint: Path | None):
        self.step = step
        self.checkpoint = checkpoint
        super().__init__(f"non-finite training state at step {step} ({reason}); "
                         f"last good checkpoint: {checkpoint}")


@dataclass
class TrainResult:
    checkpoint: Path
    checkpoint_sha256: str
    history: list[dict] = field(default_factory=list)      # per-step rows
    val_f: list[float] = field(default_factory=list)      # per evaluated epoch
    val_cpu: list[float] = field(default_factory=list)    # CPU seconds spent when each val_f was taken
    report: EvalReport | None = None
    seconds: float = 0.0


def scene_config(cfg: RunConfig) -> SceneConfig:
    return SceneConfig(image_size=cfg.image_size, max_boxes=cfg.max_boxes, curved=cfg.curved)


def load_scenes(cfg: RunConfig) -> tuple[list[SyntheticScene], list[SyntheticScene]]:
    """Train/val scenes from ``cfg.data_dir`` when set, else generated from the seed."""
    if cfg.data_dir:
        root = Path(cfg.data_dir)
        return read_dataset(root / "train"), read_dataset(root / "val")
    sc = scene_config(cfg)
    return (generate_split(cfg.seed, sc, "train", cfg.train_scenes),
            generate_split(cfg.seed, sc, "val", cfg.val_scenes))


def lr_at(cfg: RunConfig, epoch: int, step: int | None = None) -> float:
    """Step-decay schedule; ``step`` adds the linear warm-up over the first
    ``cfg.warmup_steps`` optimizer steps."""
    lr = cfg.lr * cfg.lr_decay ** sum(epoch >= m for m in cfg.lr_milestones)
    if step is not None and step < cfg.warmup_steps:
        lr *= (step + 1) / cfg.warmup_steps
    return lr


def loss_weights(cfg: RunConfig) -> LossWeights:
    return LossWeights(cfg.class_weight, cfg.det_weight, cfg.fs_weight, cfg.fs_milestones)


class Batch:
    def __init__(self, scenes: list[SyntheticScene], size: tuple[int, int]):
        self.images = np.stack([s.image for s in scenes])
        self.boxes = [s.boxes for s in scenes]
        self.beziers = [s.beziers for s in scenes] if scenes[0].beziers is not None else None
        per_image = [make_score_targets(s.boxes, size) for s in scenes]
        self.per_image_targets = per_image
        self.score_targets = [np.stack([t[k] for t in per_image]) for k in range(len(per_image[0]))]


def batch_loss(model: Detector, batch: Batch, weights: LossWeights, epoch: int, cfg: RunConfig):
    """Forward pass plus the weighted objective; returns (total, parts)."""
    if cfg.adaptive_fraction is None:
        out = model(batch.images)
        rep = compute_losses(out.batched, batch.boxes, out.scores, batch.score_targets, weights, epoch,
                             cfg.tau, batch.beziers, cfg.gwd_normalization)
        return rep.total, rep.parts
    fg = [foreground_masks(t) for t in batch.per_image_targets]
    out = model(batch.images, foreground=fg)
    B = len(out.detections)
    total, parts = None, {"class": 0.0, "det": 0.0, "fs": 0.0}
    for b, det in enumerate(out.detections):
        sc = [T.getitem(s, slice(b, b + 1)) for s in out.scores]
        st = [t[b:b + 1] for t in batch.score_targets]
        bz = [batch.beziers[b]] if batch.beziers is not None else None
        rep = compute_losses(det, [batch.boxes[b]], sc, st, weights, epoch, cfg.tau, bz, cfg.gwd_normalization)
        total = rep.total if total is None else total + rep.total
        for k, v in rep.parts.items():
            parts[k] += v / B
    return total * (1.0 / B), parts


def validate(model: Detector, scenes: list[SyntheticScene], threshold: float) -> EvalReport:
    dets = infer(np.stack([s.image for s in scenes]), model, threshold)
    by_id = dict(zip((s.id for s in scenes), dets))
    gt = {s.id: s.boxes for s in scenes}
    bz = {s.id: s.beziers for s in scenes} if scenes[0].beziers is not None else None
    return evaluate(by_id, gt, 0.5, bz)


def train(cfg: RunConfig, scenes: tuple[list[SyntheticScene], list[SyntheticScene]] | None = None,
          out_dir: str | Path | None = None, max_steps: int | None = None,
          cpu_budget: float | None = None) -> TrainResult:
    """Train a detector; writes ``model.ckpt``, ``train_log.csv`` and ``val.csv``.

    ``max_steps`` stops early (overfit checks); ``cpu_budget`` stops after
    the first epoch that ends past that many CPU seconds.  The final
    checkpoint is always written.  A non-finite loss or gradient aborts with
    :class:`TrainingDiverged`, leaving the previous epoch's checkpoint in place.
    """
    t0 = time.process_time()
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    train_scenes, val_scenes = scenes if scenes is not None else load_scenes(cfg)
    size = (cfg.image_size, cfg.image_size)
    model = Detector(cfg)
    opt = AdamW(model.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    weights = loss_weights(cfg)
    ckpt = out / "model.ckpt"
    last_good: Path | None = None
    result = TrainResult(ckpt, "")
    step = 0

    with open(out / "train_log.csv", "w", newline="") as fh, open(out / "val.csv", "w", newline="") as vh:
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)
        vwriter = csv.writer(vh)
        vwriter.writerow(("epoch", "precision", "recall", "f_measure", "cpu_s"))
        for epoch in range(cfg.epochs):
            order = np.random.default_rng([cfg.seed, 7, epoch]).permutation(len(train_scenes))
            for start in range(0, len(order), cfg.batch_size):
                idx = tuple(order[start:start + cfg.batch_size].tolist())
                batch = Batch([train_scenes[i] for i in idx], size)
                opt.lr = lr_at(cfg, epoch, step)
                try:
                    total, parts = batch_loss(model, batch, weights, epoch, cfg)
                    opt.zero_grad()
                    total.backward()
                    opt.step()
                except (FloatingPointError, NonFiniteGradient) as exc:
                    raise TrainingDiverged(step, str(exc), last_good) from exc
                row = {"epoch": epoch, "step": step, "lr": opt.lr, "L_class": parts["class"],
                       "L_det": parts["det"], "L_fs": parts["fs"], "L_total": float(total.data)}
                writer.writerow([row[k] for k in LOG_FIELDS])
                result.history.append(row)
                step += 1
                if max_steps is not None and step >= max_steps:
                    break
            fh.flush()
            evaluated = (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1
            if evaluated and val_scenes:
                report = validate(model, val_scenes, cfg.threshold)
                cpu = time.process_time() - t0
                result.val_f.append(report.f_measure)
                result.val_cpu.append(cpu)
                result.report = report
                vwriter.writerow((epoch, report.precision, report.recall, report.f_measure, round(cpu, 1)))
                vh.flush()
                log.info("epoch %d step %d %s", epoch, step, report.summary())
            result.checkpoint_sha256 = save_model(ckpt, model, {"epoch": epoch, "step": step})
            last_good = ckpt
            if max_steps is not None and step >= max_steps:
                break
            if cpu_budget is not None and time.process_time() - t0 > cpu_budget:
                break
        if cfg.epochs == 0:
            result.checkpoint_sha256 = save_model(ckpt, model, {"epoch": -1, "step": 0})
    if result.report is not None:
        result.report.save(out / "val_report.json")
    result.seconds = time.process_time() - t0
    return result


def moving_average(values, window: int = 20) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([v.mean()]) if len(v) else v
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window

