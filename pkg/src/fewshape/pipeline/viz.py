"""PGM score maps and SVG overlays."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from ..geometry import box_corners


def score_to_pgm(scores: np.ndarray) -> bytes:
    """Binary 8-bit PGM, values mapped linearly from [0, 1] to [0, 255]."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise ValueError(f"score map must be 2-D, got shape {s.shape}")
    pix = np.round(np.clip(s, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = pix.shape
    return f"P5\n{w} {h}\n255\n".encode() + pix.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def write_pgm(path, scores: np.ndarray) -> None:
    Path(path).write_bytes(score_to_pgm(scores))


def _points(pts: np.ndarray) -> str:
    return " ".join(f"{x:.6f},{y:.6f}" for x, y in pts)


def svg_overlay(size: tuple[int, int], boxes: Sequence = (), beziers: Sequence | None = None,
                scores: Sequence[float] | None = None, colour: str = "lime") -> str:
    """Rotated boxes as polygons, Bezier control points as red dots."""
    h, w = size
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
           f'<rect width="{w}" height="{h}" fill="black"/>']
    for i, b in enumerate(boxes):
        title = f"<title>{scores[i]:.3f}</title>" if scores is not None else ""
        out.append(f'<polygon class="box" points="{_points(box_corners(np.asarray(b, dtype=np.float64)))}" '
                   f'fill="none" stroke="{colour}" stroke-width="1">{title}</polygon>')
    for ctrl in beziers if beziers is not None else ():
        for x, y in np.asarray(ctrl, dtype=np.float64).reshape(8, 2):
            out.append(f'<circle class="ctrl" cx="{x:.6f}" cy="{y:.6f}" r="1.5" fill="red"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, size: tuple[int, int], boxes: Sequence = (), beziers: Sequence | None = None,
              scores: Sequence[float] | None = None) -> None:
    Path(path).write_text(svg_overlay(size, boxes, beziers, scores))


def parse_svg_polygons(svg: str) -> list[np.ndarray]:
    polys = []
    for chunk in svg.split('points="')[1:]:
        pts = chunk.split('"', 1)[0]
        polys.append(np.array([[float(v) for v in p.split(",")] for p in pts.split()]))
    return polys
