"""NMS-free inference: keep every token whose confidence beats the threshold."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..config import RunConfig
from ..numerics.io import load_checkpoint, save_checkpoint
from ..numerics.tensor import no_grad
from .evaluate import ImageDetections
from .model import Detector

DEFAULT_THRESHOLD = 0.5


def save_model(path, model: Detector, extra: dict | None = None) -> str:
    meta = {"config": model.cfg.to_dict(), **(extra or {})}
    return save_checkpoint(path, model.state_dict(), meta)


def load_model(path, cfg: RunConfig | None = None) -> Detector:
    """Rebuild the detector recorded in a checkpoint.

    A shape or name mismatch against ``cfg`` raises ``ValueError`` listing the
    differences.
    """
    tensors, meta = load_checkpoint(Path(path))
    if cfg is None:
        cfg = RunConfig.from_dict(meta["config"])
    model = Detector(cfg)
    model.load_state_dict(tensors)
    return model


def filter_detections(probs: np.ndarray, boxes: np.ndarray, beziers: np.ndarray | None,
                      threshold: float) -> ImageDetections:
    keep = probs > threshold
    return ImageDetections(probs[keep], boxes[keep], beziers[keep] if beziers is not None else None)


def infer(images, model: Detector | str | Path, threshold: float = DEFAULT_THRESHOLD,
          batch_size: int = 16) -> list[ImageDetections]:
    """Detections for each image of ``images`` (B, H, W, 3) or a single (H, W, 3)."""
    if not isinstance(model, Detector):
        model = load_model(model)
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            fwd = model(images[start:start + batch_size])
            for det in fwd.detections:
                bez = det.beziers.data[0] if det.beziers is not None else None
                out.append(filter_detections(det.probs.data[0], det.boxes[0], bez, threshold))
    return out
