"""Full detector: backbone -> sampler -> grouper."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..backbone import Backbone
from ..config import RunConfig
from ..grouper import DetectionSet, Grouper
from ..numerics import tensor as T
from ..numerics.module import Module
from ..numerics.tensor import Tensor
from ..sampler import (FOREGROUND_THRESHOLD, FeatureSampler, SampledFeatureSet, foreground_masks,
                       select_adaptive, select_topk)


@dataclass
class ForwardOutput:
    """``detections``/``sampled`` hold one entry per image.

    With fixed budgets they are views of a single batched pass; adaptive
    selection yields a different token count per image.
    """
    detections: list[DetectionSet]
    scores: list[Tensor]          # one (B, H', W') map per scale, finest first
    sampled: list[SampledFeatureSet]
    batched: DetectionSet | None = None


class Detector(Module):
    def __init__(self, cfg: RunConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.backbone = Backbone(rng, cfg.channels, cfg.backbone_widths)
        self.sampler = FeatureSampler(rng, cfg.channels)
        self.grouper = Grouper(rng, cfg.channels, cfg.mode, cfg.encoder_layers, cfg.heads, cfg.ffn)
        self.cfg = cfg

    def __call__(self, images, foreground: Sequence[Sequence[np.ndarray]] | None = None) -> ForwardOutput:
        """``images`` is (B, H, W, 3) or (H, W, 3).

        In adaptive mode ``foreground`` gives per image a boolean mask per
        scale; without it the predicted score map stands in for the targets.
        """
        images = T.as_tensor(images)
        if images.ndim == 3:
            images = T.reshape(images, (1,) + images.shape)
        pyramid = self.backbone(images)
        pooled, scores = self.sampler(pyramid)
        size = pyramid.image_size
        B = images.shape[0]
        if self.cfg.adaptive_fraction is None:
            sampled = select_topk(scores, pooled, self.cfg.budgets_fine_first)
            det = self.grouper(sampled, size)
            return ForwardOutput(split_batch(det), scores, [sampled] * B, det)
        dets, samples = [], []
        for b in range(B):
            sc = [T.getitem(s, slice(b, b + 1)) for s in scores]
            pl = [T.getitem(p, slice(b, b + 1)) for p in pooled]
            if foreground is not None:
                fg = foreground[b]
            else:
                fg = foreground_masks([s.data[0] for s in sc], FOREGROUND_THRESHOLD)
            s_b = select_adaptive(sc, pl, self.cfg.adaptive_fraction, fg)
            samples.append(s_b)
            dets.append(self.grouper(s_b, size))
        return ForwardOutput(dets, scores, samples)


def split_batch(det: DetectionSet) -> list[DetectionSet]:
    """Per-image views of a batched detection set (graph edges kept)."""
    out = []
    for b in range(det.probs.shape[0]):
        sl = slice(b, b + 1)
        bez = T.getitem(det.beziers, sl) if det.beziers is not None else None
        out.append(DetectionSet(T.getitem(det.probs, sl), T.getitem(det.raw_boxes, sl), det.image_size, bez, det.mode))
    return out
