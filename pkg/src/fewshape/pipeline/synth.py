"""Synthetic scenes: striped bright bars on a noisy background."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from ..geometry import BezierRegion, bezier_to_polygon, box_corners, convex_intersection_area
from ..numerics.io import load_tensor, save_tensor

SPLITS = {"train": 0, "val": 1, "test": 2}


@dataclass
class SceneConfig:
    image_size: int = 128
    max_boxes: int = 6
    min_short: float = 6.0
    max_short: float = 22.0
    min_aspect: float = 1.5
    max_aspect: float = 12.0
    curved: bool = False
    noise: float = 0.05

    def __post_init__(self):
        if self.image_size % 32:
            raise ValueError(f"image size {self.image_size} must be divisible by 32")


@dataclass
class SyntheticScene:
    id: str
    image: np.ndarray                 # (H, W, 3)
    boxes: np.ndarray                 # (K, 5) x, y, w, h, theta
    beziers: Optional[np.ndarray] = None   # (K, 16)


def scene_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, SPLITS[split], index])


def _background(rng: np.random.Generator, size: int, noise: float) -> np.ndarray:
    coarse = rng.uniform(0.0, 0.35, size=(size // 16 + 1, size // 16 + 1, 3))
    t = (np.arange(size) + 0.5) / 16.0
    i0 = np.minimum(t.astype(int), coarse.shape[0] - 2)
    f = (t - i0)[:, None, None]
    rows = coarse[i0] * (1 - f) + coarse[i0 + 1] * f                  # (size, n, 3)
    g = (t - i0)[None, :, None]
    img = rows[:, i0] * (1 - g) + rows[:, i0 + 1] * g
    return img + rng.normal(0.0, noise, size=img.shape)


def _sample_box(rng: np.random.Generator, cfg: SceneConfig) -> np.ndarray | None:
    S = cfg.image_size
    for _ in range(20):
        h = math.exp(rng.uniform(math.log(cfg.min_short), math.log(cfg.max_short)))
        aspect = math.exp(rng.uniform(math.log(cfg.min_aspect), math.log(cfg.max_aspect)))
        w = h * aspect
        if w > 0.9 * S:
            continue
        theta = rng.uniform(-math.pi / 2, math.pi / 2)
        half_x = 0.5 * (abs(w * math.cos(theta)) + abs(h * math.sin(theta)))
        half_y = 0.5 * (abs(w * math.sin(theta)) + abs(h * math.cos(theta)))
        if 2 * half_x > S - 4 or 2 * half_y > S - 4:
            continue
        x = rng.uniform(half_x + 2, S - half_x - 2)
        y = rng.uniform(half_y + 2, S - half_y - 2)
        return np.array([x, y, w, h, theta])
    return None


def _inflated(box: np.ndarray, margin: float) -> np.ndarray:
    b = box.copy()
    b[2] += 2 * margin
    b[3] += 2 * margin
    return box_corners(b)


def _curve_for(rng: np.random.Generator, box: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bend a box into a band; returns (control points (8, 2), enclosing box)."""
    x, y, w, h, t = box
    eu = np.array([math.cos(t), math.sin(t)])
    ev = np.array([-math.sin(t), math.cos(t)])
    bend = rng.uniform(-0.2, 0.2) * w
    centre = np.array([x, y]) - 0.375 * bend * ev
    offs = [0.0, bend, bend, 0.0]
    mid = [centre + (-w / 2 + i * w / 3) * eu + offs[i] * ev for i in range(4)]
    top = [p - 0.5 * h * ev for p in mid]
    bottom = [p + 0.5 * h * ev for p in mid[::-1]]
    enclosing = np.array([x, y, w, h + 0.75 * abs(bend), t])
    return np.array(top + bottom), enclosing


def _inside_polygon(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    inside = np.zeros(px.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < xint)
    return inside


def _paint(img: np.ndarray, rng: np.random.Generator, box: np.ndarray, ctrl: np.ndarray | None) -> None:
    S = img.shape[0]
    py, px = np.mgrid[0:S, 0:S] + 0.5
    x, y, w, h, t = box
    c, s = math.cos(t), math.sin(t)
    u = (px - x) * c + (py - y) * s
    v = -(px - x) * s + (py - y) * c
    if ctrl is None:
        dist = np.maximum(np.abs(u) - w / 2, np.abs(v) - h / 2)
        cover = np.clip(0.5 - dist, 0.0, 1.0)
    else:
        poly = bezier_to_polygon(BezierRegion(ctrl), 16).vertices
        cover = _inside_polygon(px, py, poly).astype(np.float64)
    period = max(0.8 * h, 3.0)
    phase = rng.uniform(0, 2 * math.pi)
    texture = 0.75 + 0.25 * np.cos(2 * math.pi * u / period + phase)
    colour = rng.uniform(0.65, 1.0, size=3)
    paint = texture[..., None] * colour
    img[:] = img * (1 - cover[..., None]) + paint * cover[..., None]


def generate_scene(seed: int, cfg: SceneConfig = SceneConfig(), split: str = "train", index: int = 0) -> SyntheticScene:
    """Deterministic scene for (seed, split, index)."""
    rng = scene_rng(seed, split, index)
    S = cfg.image_size
    img = _background(rng, S, cfg.noise)
    want = int(rng.integers(1, cfg.max_boxes + 1))
    boxes: list[np.ndarray] = []
    ctrls: list[np.ndarray] = []
    shapes: list[np.ndarray] = []
    for _ in range(100):
        if len(boxes) == want:
            break
        box = _sample_box(rng, cfg)
        if box is None:
            continue
        ctrl = None
        if cfg.curved:
            ctrl, box = _curve_for(rng, box)
            if box[3] > 0.9 * S:
                continue
        shape = _inflated(box, 2.0)
        if any(convex_intersection_area(shape, o) > 0 for o in shapes):
            continue
        if ctrl is not None and (ctrl.min() < 1 or ctrl.max() > S - 1):
            continue
        if box_corners(box).min() < 1 or box_corners(box).max() > S - 1:
            continue
        boxes.append(box)
        shapes.append(shape)
        if ctrl is not None:
            ctrls.append(ctrl.reshape(16))
    for i, box in enumerate(boxes):
        _paint(img, rng, box, ctrls[i].reshape(8, 2) if cfg.curved else None)
    img = np.clip(img, 0.0, 1.0) - 0.5
    bz = np.array(ctrls).reshape(-1, 16) if cfg.curved else None
    return SyntheticScene(f"{split}-{seed}-{index:05d}", img, np.array(boxes).reshape(-1, 5), bz)


def generate_split(seed: int, cfg: SceneConfig, split: str, count: int) -> list[SyntheticScene]:
    return [generate_scene(seed, cfg, split, i) for i in range(count)]


# --------------------------------------------------------------- on disk

def write_dataset(scenes: Iterable[SyntheticScene], out_dir, force: bool = False) -> Path:
    """JSON-lines index plus one tensor file per image."""
    out = Path(out_dir)
    index = out / "scenes.jsonl"
    if index.exists() and not force:
        raise FileExistsError(f"{index} exists; pass force to overwrite")
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for sc in scenes:
        rel = f"images/{sc.id}.ftns"
        save_tensor(out / rel, sc.image)
        rec = {"id": sc.id, "image": rel,
               "boxes": [dict(zip(("x", "y", "w", "h", "theta"), map(float, b))) for b in sc.boxes]}
        if sc.beziers is not None:
            rec["beziers"] = [[float(v) for v in b] for b in sc.beziers]
        lines.append(json.dumps(rec, sort_keys=True))
    index.write_text("\n".join(lines) + ("\n" if lines else ""))
    return index


def read_dataset(path) -> list[SyntheticScene]:
    path = Path(path)
    index = path / "scenes.jsonl" if path.is_dir() else path
    scenes = []
    for line in index.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        img = load_tensor(index.parent / rec["image"])
        boxes = np.array([[b["x"], b["y"], b["w"], b["h"], b.get("theta", 0.0)] for b in rec["boxes"]]).reshape(-1, 5)
        bz = np.array(rec["beziers"]).reshape(-1, 16) if rec.get("beziers") is not None else None
        scenes.append(SyntheticScene(rec["id"], img, boxes, bz))
    return scenes
