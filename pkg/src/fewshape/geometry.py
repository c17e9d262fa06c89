"""Rotated-box algebra, Gaussian Wasserstein distance, polygon IoU, Beziers.

Image coordinates: x grows right, y grows down.  A box's width axis points
along (cos θ, sin θ).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Literal, Union

import numpy as np

AREA_EPS = 1e-9


class DegeneratePolygonWarning(UserWarning):
    pass


def canonical_angle(theta: float) -> float:
    """Wrap to [-pi/2, pi/2); a rectangle is unchanged by a half turn."""
    return (theta + math.pi / 2) % math.pi - math.pi / 2


@dataclass(frozen=True)
class RotatedBox:
    x: float
    y: float
    w: float
    h: float
    theta: float = 0.0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box sides must be positive, got w={self.w}, h={self.h}")
        object.__setattr__(self, "theta", canonical_angle(float(self.theta)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h, self.theta])

    @classmethod
    def from_array(cls, a) -> "RotatedBox":
        return cls(*(float(v) for v in a[:5]))

    @property
    def area(self) -> float:
        return self.w * self.h

    def scaled(self, s: float) -> "RotatedBox":
        return RotatedBox(self.x * s, self.y * s, self.w * s, self.h * s, self.theta)

    def corners(self) -> np.ndarray:
        return box_corners(self.as_array())

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h, "theta": self.theta}

    @classmethod
    def from_dict(cls, d: dict) -> "RotatedBox":
        return cls(d["x"], d["y"], d["w"], d["h"], d.get("theta", 0.0))


@dataclass(frozen=True)
class GaussianBox:
    m: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        s = self.sigma
        if s.shape != (2, 2) or abs(s[0, 1] - s[1, 0]) > 1e-12 * max(1.0, np.abs(s).max()):
            raise ValueError("sigma must be a symmetric 2x2 matrix")
        if not (np.linalg.det(s) > 0 and np.trace(s) > 0):
            raise ValueError("sigma must be positive definite")


# -------------------------------------------------------------- Gaussian form

def gaussian_params(boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized (..., 5) boxes -> means (..., 2) and covariances (..., 2, 2)."""
    boxes = np.asarray(boxes, dtype=np.float64)
    x, y, w, h, t = np.moveaxis(boxes, -1, 0)
    c, s = np.cos(t), np.sin(t)
    a = 0.5 * w * c * c + 0.5 * h * s * s
    b = 0.5 * (w - h) * c * s
    d = 0.5 * w * s * s + 0.5 * h * c * c
    # sigma = M @ M with M = [[a, b], [b, d]]
    sig = np.stack([np.stack([a * a + b * b, b * (a + d)], -1),
                    np.stack([b * (a + d), b * b + d * d], -1)], -2)
    return np.stack([x, y], -1), sig


def box_to_gaussian(b: RotatedBox) -> GaussianBox:
    m, sig = gaussian_params(b.as_array())
    return GaussianBox(m, sig)


def sqrtm_2x2(mat: np.ndarray) -> np.ndarray:
    """Principal square root of 2x2 SPD matrices (batched over leading axes)."""
    mat = np.asarray(mat, dtype=np.float64)
    det = mat[..., 0, 0] * mat[..., 1, 1] - mat[..., 0, 1] * mat[..., 1, 0]
    s = np.sqrt(det)
    t = np.sqrt(mat[..., 0, 0] + mat[..., 1, 1] + 2 * s)
    return (mat + s[..., None, None] * np.eye(2)) / t[..., None, None]


def _is_spd(sig: np.ndarray) -> bool:
    return bool(np.linalg.det(sig) > 0 and np.trace(sig) > 0)


def wasserstein_sq_arrays(m1, s1, m2, s2) -> np.ndarray:
    """Batched squared 2-Wasserstein distance between 2-D Gaussians."""
    dm = np.sum((np.asarray(m1) - np.asarray(m2)) ** 2, axis=-1)
    tr1 = s1[..., 0, 0] + s1[..., 1, 1]
    tr2 = s2[..., 0, 0] + s2[..., 1, 1]
    det1 = s1[..., 0, 0] * s1[..., 1, 1] - s1[..., 0, 1] * s1[..., 1, 0]
    det2 = s2[..., 0, 0] * s2[..., 1, 1] - s2[..., 0, 1] * s2[..., 1, 0]
    tr12 = np.einsum("...ij,...ji->...", s1, s2)
    cross = np.sqrt(np.maximum(tr12 + 2 * np.sqrt(np.maximum(det1 * det2, 0.0)), 0.0))
    return np.maximum(dm + tr1 + tr2 - 2 * cross, 0.0)


def wasserstein_sq(a: GaussianBox, b: GaussianBox) -> float:
    if not (_is_spd(a.sigma) and _is_spd(b.sigma)):
        raise ValueError("wasserstein_sq requires SPD covariances")
    return float(wasserstein_sq_arrays(a.m, a.sigma, b.m, b.sigma))


Normalization = Literal["sqrt_area", "area"]


def _norm_scale(target_area, normalization: Normalization):
    # uniform scaling by 1/s multiplies d^2 by 1/s^2
    if normalization == "sqrt_area":
        return target_area
    if normalization == "area":
        return target_area ** 2
    raise ValueError(f"unknown normalization {normalization!r}")


def gwd_loss_term(pred: RotatedBox, target: RotatedBox, tau: float = 3.0,
                  normalization: Normalization = "sqrt_area") -> float:
    """``1 - 1/(tau + log(1 + d^2))`` on boxes rescaled by the target's size.

    With ``"sqrt_area"`` both boxes are divided by sqrt(w_t h_t) so the target
    has unit area; ``"area"`` divides by w_t h_t itself.
    """
    if tau <= 1:
        raise ValueError(f"tau must exceed 1, got {tau}")
    if target.area <= AREA_EPS:
        raise ValueError("degenerate target area")
    m1, s1 = gaussian_params(pred.as_array())
    m2, s2 = gaussian_params(target.as_array())
    d2 = wasserstein_sq_arrays(m1, s1, m2, s2) / _norm_scale(target.area, normalization)
    return float(1.0 - 1.0 / (tau + np.log1p(d2)))


def gwd_cost_matrix(pred: np.ndarray, target: np.ndarray, tau: float = 3.0,
                    normalization: Normalization = "sqrt_area") -> np.ndarray:
    """Pairwise loss terms for (P, 5) predictions against (T, 5) targets -> (P, T)."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 5)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 5)
    m1, s1 = gaussian_params(pred)
    m2, s2 = gaussian_params(target)
    d2 = wasserstein_sq_arrays(m1[:, None], s1[:, None], m2[None], s2[None])
    d2 = d2 / _norm_scale(target[:, 2] * target[:, 3], normalization)[None]
    return 1.0 - 1.0 / (tau + np.log1p(d2))


# ------------------------------------------------------------------ polygons

@dataclass
class Polygon:
    vertices: np.ndarray
    simple: bool = True

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 2)
        if len(v) >= 3 and signed_area(v) < 0:
            v = v[::-1].copy()
        self.vertices = v

    @property
    def area(self) -> float:
        return abs(signed_area(self.vertices))


def signed_area(v: np.ndarray) -> float:
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def box_corners(box) -> np.ndarray:
    """Corners of an (x, y, w, h, θ) box in positive-signed-area order."""
    x, y, w, h, t = (float(v) for v in np.asarray(box)[:5])
    c, s = math.cos(t), math.sin(t)
    ux, uy = 0.5 * w * c, 0.5 * w * s
    vx, vy = -0.5 * h * s, 0.5 * h * c
    return np.array([[x - ux - vx, y - uy - vy], [x + ux - vx, y + uy - vy],
                     [x + ux + vx, y + uy + vy], [x - ux + vx, y - uy + vy]])


def clip_convex(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: ``subject`` clipped by convex positive-area ``clipper``."""
    out = subject
    n = len(clipper)
    for i in range(n):
        if len(out) == 0:
            break
        a, b = clipper[i], clipper[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]
        side = ex * (out[:, 1] - a[1]) - ey * (out[:, 0] - a[0])
        pts = []
        m = len(out)
        for j in range(m):
            p, q = out[j], out[(j + 1) % m]
            sp, sq = side[j], side[(j + 1) % m]
            if sp >= 0:
                pts.append(p)
            if (sp >= 0) != (sq >= 0):
                r = sp / (sp - sq)
                pts.append(p + r * (q - p))
        out = np.array(pts).reshape(-1, 2)
    return out


def convex_intersection_area(a: np.ndarray, b: np.ndarray) -> float:
    inter = clip_convex(a, b)
    return abs(signed_area(inter)) if len(inter) >= 3 else 0.0


def _is_convex(v: np.ndarray) -> bool:
    d1 = np.roll(v, -1, axis=0) - v
    d2 = np.roll(d1, -1, axis=0)
    cross = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    return bool(np.all(cross >= -1e-12) or np.all(cross <= 1e-12))


def triangulate(v: np.ndarray) -> list[np.ndarray]:
    """Ear-clipping triangulation of a simple positive-area polygon."""
    idx = list(range(len(v)))
    tris = []
    guard = 0
    while len(idx) > 3 and guard < 10 * len(v) ** 2:
        guard += 1
        n = len(idx)
        for k in range(n):
            i0, i1, i2 = idx[k - 1], idx[k], idx[(k + 1) % n]
            a, b, c = v[i0], v[i1], v[i2]
            cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
            if cross <= 1e-12:
                continue
            tri = np.array([a, b, c])
            others = [v[j] for j in idx if j not in (i0, i1, i2)]
            if any(_in_triangle(p, tri) for p in others):
                continue
            tris.append(tri)
            idx.pop(k)
            break
        else:
            # no ear found (numerical trouble): drop the flattest vertex
            idx.pop(0)
    if len(idx) == 3:
        tri = v[idx]
        if signed_area(tri) > 0:
            tris.append(tri)
    return tris


def _in_triangle(p, tri) -> bool:
    a, b, c = tri
    d1 = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
    d2 = (c[0] - b[0]) * (p[1] - b[1]) - (c[1] - b[1]) * (p[0] - b[0])
    d3 = (a[0] - c[0]) * (p[1] - c[1]) - (a[1] - c[1]) * (p[0] - c[0])
    return d1 >= 0 and d2 >= 0 and d3 >= 0


def _convex_pieces(v: np.ndarray) -> list[np.ndarray]:
    return [v] if _is_convex(v) else triangulate(v)


def intersection_area(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection area of two simple positive-area polygons via convex pieces."""
    total = 0.0
    for pa in _convex_pieces(a):
        for pb in _convex_pieces(b):
            total += convex_intersection_area(pa, pb)
    return total


Shape = Union[RotatedBox, Polygon, np.ndarray]


def _as_vertices(s: Shape) -> np.ndarray:
    if isinstance(s, RotatedBox):
        return s.corners()
    if isinstance(s, Polygon):
        return s.vertices
    arr = np.asarray(s, dtype=np.float64)
    if arr.shape == (5,):
        return box_corners(arr)
    return Polygon(arr).vertices


def rotated_iou(a: Shape, b: Shape) -> float:
    """Area IoU of two boxes or polygons; degenerate input gives 0 and a warning."""
    va, vb = _as_vertices(a), _as_vertices(b)
    area_a, area_b = abs(signed_area(va)), abs(signed_area(vb))
    if len(va) < 3 or len(vb) < 3 or area_a <= AREA_EPS or area_b <= AREA_EPS:
        warnings.warn("degenerate polygon in rotated_iou", DegeneratePolygonWarning, stacklevel=2)
        return 0.0
    inter = intersection_area(va, vb)
    union = area_a + area_b - inter
    if union <= AREA_EPS:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a).reshape(-1, 5)
    b = np.asarray(b).reshape(-1, 5)
    out = np.zeros((len(a), len(b)))
    if not len(a) or not len(b):
        return out
    ra = np.hypot(a[:, 2], a[:, 3]) / 2
    rb = np.hypot(b[:, 2], b[:, 3]) / 2
    near = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1]) < ra[:, None] + rb[None]
    for i, j in zip(*np.nonzero(near)):
        out[i, j] = rotated_iou(a[i], b[j])
    return out


# ------------------------------------------------------------------- Beziers

@dataclass(frozen=True)
class BezierRegion:
    """Top boundary P0..P3 (left to right), bottom boundary P4..P7 (right to left)."""
    points: np.ndarray = field(repr=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if pts.shape != (8, 2):
            raise ValueError(f"a Bezier region needs exactly 8 control points, got {len(pts)}")
        object.__setattr__(self, "points", pts)

    def flat(self) -> np.ndarray:
        return self.points.reshape(16).copy()


def bernstein3(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    u = 1 - t
    return np.stack([u ** 3, 3 * u * u * t, 3 * u * t * t, t ** 3], -1)


def bezier_eval(region: BezierRegion, t: float, boundary: Literal["top", "bottom"] = "top") -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if boundary not in ("top", "bottom"):
        raise ValueError(f"boundary must be 'top' or 'bottom', got {boundary!r}")
    ctrl = region.points[:4] if boundary == "top" else region.points[4:]
    return bernstein3(t) @ ctrl


def _segments_cross(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    d1, d2 = orient(p3, p4, p1), orient(p3, p4, p2)
    d3, d4 = orient(p1, p2, p3), orient(p1, p2, p4)
    return (d1 * d2 < 0) and (d3 * d4 < 0)


def is_simple(v: np.ndarray) -> bool:
    n = len(v)
    for i in range(n):
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            if _segments_cross(v[i], v[(i + 1) % n], v[j], v[(j + 1) % n]):
                return False
    return True


def _dedup(v: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    keep = [v[0]]
    for p in v[1:]:
        if np.hypot(*(p - keep[-1])) > tol:
            keep.append(p)
    if len(keep) > 1 and np.hypot(*(keep[0] - keep[-1])) <= tol:
        keep.pop()
    # drop collinear interior points
    pts = np.array(keep)
    out = []
    n = len(pts)
    for i in range(n):
        a, b, c = pts[i - 1], pts[i], pts[(i + 1) % n]
        cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(cross) > tol * max(1.0, np.abs(pts).max()):
            out.append(b)
    return np.array(out) if len(out) >= 3 else pts


def bezier_to_polygon(region: BezierRegion, samples_per_curve: int = 16) -> Polygon:
    """Sample both curves (t from 0 to 1) and join them into a closed polygon."""
    if samples_per_curve < 2:
        raise ValueError("samples_per_curve must be at least 2")
    basis = bernstein3(np.linspace(0.0, 1.0, samples_per_curve))
    top = basis @ region.points[:4]
    bottom = basis @ region.points[4:]
    v = _dedup(np.concatenate([top, bottom]))
    return Polygon(v, simple=is_simple(v))


def rect_to_bezier(box) -> BezierRegion:
    """Straight-edged Bezier encoding of a rotated box."""
    c = box_corners(box)
    top = np.linspace(c[0], c[1], 4)
    bottom = np.linspace(c[2], c[3], 4)
    return BezierRegion(np.concatenate([top, bottom]))
