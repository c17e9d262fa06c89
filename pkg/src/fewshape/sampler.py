"""Feature sampling: score targets, constrained deformable pooling, scoring
net, and top-N / adaptive token selection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .backbone import CoordConv, FeaturePyramid
from .numerics import tensor as T
from .numerics.module import Conv2d, Module
from .numerics.tensor import Tensor

# pooled maps sit one octave below the pyramid
SCORE_DIVISORS = (8, 16, 32)
FOREGROUND_THRESHOLD = 0.1


# ------------------------------------------------------------------ targets

def render_gaussian(shape: tuple[int, int], divisor: int, box) -> np.ndarray:
    """One instance's rotated Gaussian on an (H', W') grid of ``divisor``-pixel cells.

    The peak sits on the centre of the cell containing the box centre so that
    cell reads exactly 1; spreads are w/6 along and h/6 across the box, in pixels.
    """
    x, y, w, h, t = (float(v) for v in box[:5])
    hh, ww = shape
    ci = min(max(int(y // divisor), 0), hh - 1)
    cj = min(max(int(x // divisor), 0), ww - 1)
    cy = (ci + 0.5) * divisor
    cx = (cj + 0.5) * divisor
    ys = (np.arange(hh) + 0.5) * divisor - cy
    xs = (np.arange(ww) + 0.5) * divisor - cx
    dx, dy = np.meshgrid(xs, ys)
    c, s = math.cos(t), math.sin(t)
    along = dx * c + dy * s
    across = -dx * s + dy * c
    sa, sc = w / 6.0, h / 6.0
    return np.exp(-0.5 * ((along / sa) ** 2 + (across / sc) ** 2))


def make_score_targets(boxes: Sequence, image_size: tuple[int, int],
                       divisors: Sequence[int] = SCORE_DIVISORS) -> list[np.ndarray]:
    """Per-scale targets; overlapping instances combine by elementwise max."""
    H, W = image_size
    maps = [np.zeros((math.ceil(H / d), math.ceil(W / d))) for d in divisors]
    for box in boxes:
        b = np.asarray(box.as_array() if hasattr(box, "as_array") else box, dtype=np.float64)
        b[0] = min(max(b[0], 0.0), W - 1e-9)
        b[1] = min(max(b[1], 0.0), H - 1e-9)
        for m, d in zip(maps, divisors):
            np.maximum(m, render_gaussian(m.shape, d, b), out=m)
    return maps


# ------------------------------------------------------------------ pooling

class ConstrainedPool(Module):
    """2x2 stride-2 deformable average pooling with offsets
    ``lambda * raw * (W_k, H_k)``, ``lambda = sigmoid(mean_c f)``.

    Each input cell is one sample point of its window; ``raw`` comes from a
    zero-initialised 3x3 conv, so pooling starts as plain average pooling.
    """

    def __init__(self, rng: np.random.Generator, channels: int):
        self.offset = Conv2d(rng, channels, 2, k=3, zero=True)

    def offsets(self, f: Tensor) -> Tensor:
        B, H, W, C = f.shape
        raw = self.offset(f)                                      # (B,H,W,2) as (dx, dy) in map units
        lam = T.sigmoid(T.reduce_mean(f, axis=-1, keepdims=True))
        return raw * lam * np.array([W, H], dtype=np.float64)

    def __call__(self, f: Tensor) -> Tensor:
        B, H, W, C = f.shape
        if H % 2 or W % 2:
            raise ValueError(f"constrained pooling needs even map sides, got {H}x{W}")
        d = self.offsets(f)
        rows, cols = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
        base = np.stack([rows, cols], -1)                         # (H,W,2) as (row, col)
        coords = T.concat([d[..., 1:2], d[..., 0:1]], axis=-1) + base
        sampled = T.bilinear_sample(f, T.reshape(coords, (B, H * W, 2)))
        win = T.reshape(sampled, (B, H // 2, 2, W // 2, 2, C))
        return T.reduce_mean(T.reduce_mean(win, axis=4), axis=2)


def constrained_pool(f: Tensor, pool: ConstrainedPool) -> Tensor:
    return pool(f)


class ScoreNet(Module):
    """Two 3x3 convs (C -> C -> 1) and a sigmoid, shared across scales."""

    def __init__(self, rng: np.random.Generator, channels: int, zero_last: bool = False):
        self.conv1 = Conv2d(rng, channels, channels, k=3)
        self.conv2 = Conv2d(rng, channels, 1, k=3, zero=zero_last)

    def __call__(self, f: Tensor) -> Tensor:
        s = T.sigmoid(self.conv2(T.relu(self.conv1(f))))
        return T.reshape(s, s.shape[:3])


class FeatureSampler(Module):
    """CoordConv + constrained pooling per level, then the shared scoring net."""

    def __init__(self, rng: np.random.Generator, channels: int, n_levels: int = 3):
        self.coord = [CoordConv(rng, channels) for _ in range(n_levels)]
        self.pool = [ConstrainedPool(rng, channels) for _ in range(n_levels)]
        self.score = ScoreNet(rng, channels)

    def __call__(self, pyramid: FeaturePyramid) -> tuple[list[Tensor], list[Tensor]]:
        pooled, scores = [], []
        for f, cc, pool in zip(pyramid.levels, self.coord, self.pool):
            p = pool(cc(f))
            pooled.append(p)
            scores.append(self.score(p))
        return pooled, scores


def score_features(pooled: Sequence[Tensor], net: ScoreNet) -> list[Tensor]:
    return [net(p) for p in pooled]


# ---------------------------------------------------------------- selection

@dataclass
class SampledFeatureSet:
    features: Tensor            # (B, N, C)
    scale: np.ndarray           # (B, N) level index into SCORE_DIVISORS
    rows: np.ndarray            # (B, N)
    cols: np.ndarray            # (B, N)
    scores: np.ndarray          # (B, N)
    map_shapes: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return self.features.shape[1]


def _scores_array(s) -> np.ndarray:
    s = s.data if isinstance(s, Tensor) else np.asarray(s, dtype=np.float64)
    return s[None] if s.ndim == 2 else s


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-major flat indices of the k highest scores, ties broken by position."""
    flat = scores.reshape(-1)
    order = np.argsort(-flat, kind="stable")
    return order[:k]


def select_topk(scores: Sequence, pooled: Sequence, budgets_fine_first: Sequence[int]) -> SampledFeatureSet:
    """Gather the top ``N_k`` pooled features of every scale.

    ``budgets_fine_first`` lists budgets in level order (1/8, 1/16, 1/32).
    """
    feats, scale, rows, cols, sc = [], [], [], [], []
    shapes = []
    for k, (s, p, n) in enumerate(zip(scores, pooled, budgets_fine_first)):
        s = _scores_array(s)
        B, h, w = s.shape
        shapes.append((h, w))
        if n > h * w:
            raise ValueError(f"budget {n} exceeds {h}x{w} cells at scale 1/{SCORE_DIVISORS[k]}")
        if n == 0:
            continue
        idx = np.stack([topk_indices(s[b], n) for b in range(B)])
        p = T.as_tensor(p)
        feats.append(T.gather_rows(T.reshape(p, (B, h * w, p.shape[-1])), idx))
        scale.append(np.full(idx.shape, k))
        rows.append(idx // w)
        cols.append(idx % w)
        sc.append(np.take_along_axis(s.reshape(B, -1), idx, axis=1))
    return SampledFeatureSet(T.concat(feats, axis=1), np.concatenate(scale, 1), np.concatenate(rows, 1),
                             np.concatenate(cols, 1), np.concatenate(sc, 1), shapes)


def select_adaptive(scores: Sequence, pooled: Sequence, fraction: float,
                    foreground: Sequence[np.ndarray]) -> SampledFeatureSet:
    """Top ``ceil(fraction * #foreground)`` foreground cells over all scales jointly.

    Single image only (B == 1): the token count varies per image.  ``foreground``
    is a boolean mask per scale.  With no foreground the single best cell is kept.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    arrs = [_scores_array(s) for s in scores]
    if any(a.shape[0] != 1 for a in arrs):
        raise ValueError("select_adaptive works on one image at a time")
    flat_s = np.concatenate([a.reshape(-1) for a in arrs])
    flat_fg = np.concatenate([np.asarray(f, dtype=bool).reshape(-1) for f in foreground])
    level = np.concatenate([np.full(a.size, k) for k, a in enumerate(arrs)])
    n_fg = int(flat_fg.sum())
    if n_fg == 0:
        chosen = np.argsort(-flat_s, kind="stable")[:1]
    else:
        cand = np.nonzero(flat_fg)[0]
        order = cand[np.argsort(-flat_s[cand], kind="stable")]
        chosen = order[: math.ceil(fraction * n_fg - 1e-9)]
    offsets = np.cumsum([0] + [a.size for a in arrs])
    budgets = []
    picks = []
    for k in range(len(arrs)):
        mine = chosen[level[chosen] == k] - offsets[k]
        picks.append(mine)
        budgets.append(len(mine))
    feats, scale, rows, cols, sc = [], [], [], [], []
    shapes = []
    for k, (a, p, idx) in enumerate(zip(arrs, pooled, picks)):
        _, h, w = a.shape
        shapes.append((h, w))
        if not len(idx):
            continue
        idx = idx[np.argsort(-a.reshape(-1)[idx], kind="stable")][None]
        p = T.as_tensor(p)
        feats.append(T.gather_rows(T.reshape(p, (1, h * w, p.shape[-1])), idx))
        scale.append(np.full(idx.shape, k))
        rows.append(idx // w)
        cols.append(idx % w)
        sc.append(a.reshape(1, -1)[:, idx[0]])
    return SampledFeatureSet(T.concat(feats, axis=1), np.concatenate(scale, 1), np.concatenate(rows, 1),
                             np.concatenate(cols, 1), np.concatenate(sc, 1), shapes)


def foreground_masks(targets: Sequence[np.ndarray], threshold: float = FOREGROUND_THRESHOLD) -> list[np.ndarray]:
    return [np.asarray(t) > threshold for t in targets]
