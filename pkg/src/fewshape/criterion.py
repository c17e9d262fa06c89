"""Set matching and the training objective."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import gwd_cost_matrix
from .grouper import DetectionSet, decode_boxes_tensor
from .numerics import tensor as T
from .numerics.tensor import Tensor

PROB_EPS = 1e-7


# ---------------------------------------------------------------- matching

def _assign_rows(cost: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path assignment for n rows <= m columns.

    Returns the column of every row.  Dual potentials are kept on both sides;
    each row is inserted with one Dijkstra-like sweep vectorized over columns.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)       # 1-based row owning column j; 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            cols = np.nonzero(used)[0]
            u[owner[cols]] += delta
            v[cols] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col_of_row = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            col_of_row[owner[j] - 1] = j - 1
    return col_of_row


@dataclass
class Matching:
    pairs: list[tuple[int, int]]                      # (prediction, target), sorted by prediction
    unmatched: list[int] = field(default_factory=list)

    @property
    def pred_indices(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=np.int64)

    @property
    def target_indices(self) -> np.ndarray:
        return np.array([t for _, t in self.pairs], dtype=np.int64)


def hungarian(cost) -> Matching:
    """Minimum-total-cost one-to-one assignment on a P x T cost matrix.

    A rectangular matrix is solved with the shorter side as rows, which gives
    the same optimum as padding the short side with a constant larger than
    every real cost.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    P, Tn = cost.shape
    if P == 0 or Tn == 0:
        return Matching([], list(range(P)))
    if Tn <= P:
        col = _assign_rows(cost.T)                    # target -> prediction
        pairs = sorted((int(col[t]), t) for t in range(Tn))
    else:
        col = _assign_rows(cost)                      # prediction -> target
        pairs = [(p, int(col[p])) for p in range(P)]
    taken = {p for p, _ in pairs}
    return Matching(pairs, [p for p in range(P) if p not in taken])


def assignment_cost(cost: np.ndarray, m: Matching) -> float:
    return float(sum(cost[p, t] for p, t in m.pairs))


# ------------------------------------------------------------------ weights

@dataclass
class LossWeights:
    class_weight: float = 0.5
    det_weight: float = 1.0
    fs_weight: float = 1e-2
    fs_milestones: tuple[int, ...] = (35, 45)
    fs_decay: float = 0.1

    def fs_at(self, epoch: int) -> float:
        return self.fs_weight * self.fs_decay ** sum(epoch >= m for m in self.fs_milestones)


# --------------------------------------------------------------------- cost

def match_cost(probs: np.ndarray, boxes: np.ndarray, targets: np.ndarray, weights: LossWeights = LossWeights(),
               tau: float = 3.0, beziers: np.ndarray | None = None, target_beziers: np.ndarray | None = None,
               image_size: tuple[int, int] | None = None) -> np.ndarray:
    """cost(p, t) = w_c (1 - prob_p) + w_d gwd(box_p, box_t) [+ mean |bezier L1| in bezier mode].

    ``boxes`` and ``targets`` are decoded pixel boxes, (P, 5) and (T, 5); in
    bezier mode the box term compares axis-aligned boxes and the bezier L1 is
    measured in image-size units.
    """
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 5)
    c = weights.class_weight * (1.0 - probs)[:, None] + weights.det_weight * gwd_cost_matrix(boxes, targets, tau)
    if beziers is not None and target_beziers is not None:
        H, W = image_size
        norm = np.tile(np.array([W, H], dtype=np.float64), 8)
        diff = beziers[:, None, :] / norm - np.asarray(target_beziers)[None, :, :] / norm
        c = c + np.abs(diff).mean(-1)
    return c


# ------------------------------------------------------------------- losses

def loss_class(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Binary cross-entropy averaged over the N tokens of each image, then over images."""
    p = T.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    labels = np.asarray(labels, dtype=np.float64)
    ce = -(T.log(p) * labels + T.log(1.0 - p) * (1.0 - labels))
    return T.reduce_mean(ce)


def match_labels(n_tokens: int, matching: Matching) -> np.ndarray:
    lab = np.zeros(n_tokens)
    lab[matching.pred_indices] = 1.0
    return lab


def gwd_terms(pred: Tensor, target: np.ndarray, tau: float = 3.0, normalization: str = "sqrt_area") -> Tensor:
    """Differentiable per-pair loss terms for (M, 5) pixel boxes against constant targets."""
    target = np.asarray(target, dtype=np.float64).reshape(-1, 5)
    x, y, w, h, th = (pred[:, i] for i in range(5))
    tx, ty, tw, tht, tth = (target[:, i] for i in range(5))
    c, s = T.cos(th), T.sin(th)
    w2, h2 = w * w * 0.25, h * h * 0.25
    a11 = w2 * c * c + h2 * s * s
    a12 = (w2 - h2) * c * s
    a22 = w2 * s * s + h2 * c * c
    tc, ts = np.cos(tth), np.sin(tth)
    tw2, th2 = tw * tw * 0.25, tht * tht * 0.25
    b11 = tw2 * tc * tc + th2 * ts * ts
    b12 = (tw2 - th2) * tc * ts
    b22 = tw2 * ts * ts + th2 * tc * tc
    dm = (x - tx) ** 2 + (y - ty) ** 2
    tr_a = w2 + h2
    tr_b = tw2 + th2
    tr_ab = a11 * b11 + a12 * b12 * 2.0 + a22 * b22
    sqrt_dets = w * h * (tw * tht / 16.0)
    cross = T.sqrt(tr_ab + sqrt_dets * 2.0)
    d2 = dm + tr_a + tr_b - cross * 2.0
    area = tw * tht
    d2 = d2 * (1.0 / (area if normalization == "sqrt_area" else area ** 2))
    d2 = T.relu(d2)
    return 1.0 - 1.0 / (T.log(d2 + 1.0) + tau)


def loss_det_rbox(pred: Tensor, targets: np.ndarray, image_of_pair: np.ndarray, tau: float = 3.0,
                  normalization: str = "sqrt_area") -> Tensor:
    """Mean loss term over each image's matched pairs, then mean over those images."""
    image_of_pair = np.asarray(image_of_pair)
    _, inv, counts = np.unique(image_of_pair, return_inverse=True, return_counts=True)
    weight = 1.0 / (counts[inv] * len(counts))
    return T.reduce_sum(gwd_terms(pred, targets, tau, normalization) * weight)


def loss_det_bezier(pred_boxes: Tensor, target_boxes: np.ndarray, pred_bez: Tensor, target_bez: np.ndarray,
                    image_size: tuple[int, int]) -> Tensor:
    """Smooth-L1 on axis boxes plus smooth-L1 on the 16 control coordinates, in image units."""
    H, W = image_size
    bnorm = np.array([W, H, W, H], dtype=np.float64)
    pnorm = np.tile(np.array([W, H], dtype=np.float64), 8)
    box_term = T.reduce_mean(T.smooth_l1(pred_boxes * (1.0 / bnorm) - np.asarray(target_boxes)[:, :4] / bnorm))
    bez_term = T.reduce_mean(T.smooth_l1(pred_bez * (1.0 / pnorm) - np.asarray(target_bez) / pnorm))
    return box_term + bez_term


def loss_fs(scores: Sequence[Tensor], targets: Sequence[np.ndarray]) -> Tensor:
    """Smooth-L1 between score maps and targets, averaged over every cell of every scale."""
    total = None
    n = 0
    for s, t in zip(scores, targets):
        s = T.as_tensor(s)
        t = np.asarray(t, dtype=np.float64)
        if s.shape != t.shape:
            raise ValueError(f"score map shape {s.shape} != target shape {t.shape}")
        part = T.reduce_sum(T.smooth_l1(s - t))
        total = part if total is None else total + part
        n += t.size
    return total * (1.0 / n)


def total_loss(parts: dict[str, Tensor | float], weights: LossWeights, epoch: int) -> Tensor:
    for name, val in parts.items():
        v = val.data if isinstance(val, Tensor) else np.asarray(val)
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"non-finite loss part {name!r}")
    out = T.as_tensor(parts["class"]) * weights.class_weight + T.as_tensor(parts["det"]) * weights.det_weight
    lf = weights.fs_at(epoch)
    if lf:
        out = out + T.as_tensor(parts["fs"]) * lf
    return out


# ------------------------------------------------------------ whole batch

@dataclass
class LossReport:
    total: Tensor
    parts: dict[str, float]
    matchings: list[Matching]
    det_empty: bool = False


def compute_losses(det: DetectionSet, targets: Sequence[np.ndarray], scores: Sequence[Tensor],
                   score_targets: Sequence[np.ndarray], weights: LossWeights, epoch: int, tau: float = 3.0,
                   target_beziers: Sequence[np.ndarray] | None = None,
                   normalization: str = "sqrt_area") -> LossReport:
    """Match every image, then assemble the weighted objective for the batch.

    ``scores`` and ``score_targets`` hold one (B, H', W') map per scale.
    """
    B, N = det.probs.shape
    probs = det.probs.data
    boxes = det.boxes
    bez = det.beziers.data if det.beziers is not None else None
    labels = np.zeros((B, N))
    matchings = []
    b_idx, n_idx, tgt_rows, tgt_bez = [], [], [], []
    for b in range(B):
        tb = np.asarray(targets[b], dtype=np.float64).reshape(-1, 5)
        if not len(tb):
            matchings.append(Matching([], list(range(N))))
            continue
        if det.mode == "bezier":
            tb_axis = tb.copy()
            tb_axis[:, 4] = 0.0
            cost = match_cost(probs[b], boxes[b], tb_axis, weights, tau, bez[b], target_beziers[b], det.image_size)
        else:
            cost = match_cost(probs[b], boxes[b], tb, weights, tau)
        m = hungarian(cost)
        matchings.append(m)
        labels[b, m.pred_indices] = 1.0
        b_idx.append(np.full(len(m.pairs), b))
        n_idx.append(m.pred_indices)
        tgt_rows.append(tb[m.target_indices])
        if det.mode == "bezier":
            tgt_bez.append(np.asarray(target_beziers[b])[m.target_indices])

    l_class = loss_class(det.probs, labels)
    if b_idx:
        bi, ni = np.concatenate(b_idx), np.concatenate(n_idx)
        tgt = np.concatenate(tgt_rows)
        pred = decode_boxes_tensor(T.getitem(det.raw_boxes, (bi, ni)), det.image_size)
        if det.mode == "bezier":
            l_det = loss_det_bezier(pred, tgt, T.getitem(det.beziers, (bi, ni)), np.concatenate(tgt_bez),
                                    det.image_size)
        else:
            l_det = loss_det_rbox(pred, tgt, bi, tau, normalization)
    else:
        l_det = T.Tensor(0.0)
    l_fs = loss_fs(scores, score_targets)
    parts = {"class": l_class, "det": l_det, "fs": l_fs}
    total = total_loss(parts, weights, epoch)
    return LossReport(total, {k: float(v.data) for k, v in parts.items()}, matchings, det_empty=not b_idx)


__all__ = [
    "Matching", "LossWeights", "LossReport", "hungarian", "assignment_cost", "match_cost", "loss_class",
    "loss_det_rbox", "loss_det_bezier", "loss_fs", "total_loss", "gwd_terms", "compute_losses", "match_labels",
]
