"""Small strided conv stack with an FPN top-down path, plus CoordConv."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import tensor as T
from .numerics.module import Conv2d, LayerNorm, Module
from .numerics.tensor import Tensor

DIVISORS = (4, 8, 16)


@dataclass
class FeaturePyramid:
    levels: list[Tensor]          # each (B, H_k, W_k, C), finest first
    divisors: tuple[int, ...]
    image_size: tuple[int, int]   # (H, W)

    @property
    def channels(self) -> int:
        return self.levels[0].shape[-1]


class ConvBlock(Module):
    """3x3 stride-2 conv -> layer-norm over channels -> relu."""

    def __init__(self, rng, c_in: int, c_out: int):
        self.conv = Conv2d(rng, c_in, c_out, k=3, stride=2)
        self.norm = LayerNorm(c_out)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.norm(self.conv(x)))


class Backbone(Module):
    def __init__(self, rng: np.random.Generator, channels: int = 32, widths=(16, 32, 48, 64)):
        self.blocks = [ConvBlock(rng, c_in, c_out) for c_in, c_out in zip((3,) + tuple(widths[:-1]), widths)]
        # laterals on the stride-4, -8 and -16 taps
        self.lateral = [Conv2d(rng, w, channels, k=1) for w in widths[1:]]
        self.channels = channels

    def __call__(self, images) -> FeaturePyramid:
        images = T.as_tensor(images)
        if images.ndim == 3:
            images = T.reshape(images, (1,) + images.shape)
        _, H, W, _ = images.shape
        if H % 32 or W % 32:
            raise ValueError(f"image size {H}x{W} must be divisible by 32")
        x = images
        taps = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i >= 1:
                taps.append(x)
        lat = [conv(t) for conv, t in zip(self.lateral, taps)]
        outs = [lat[-1]]
        for lv in reversed(lat[:-1]):
            outs.append(lv + T.upsample_nearest(outs[-1], 2))
        return FeaturePyramid(outs[::-1], DIVISORS, (H, W))


def backbone_forward(backbone: Backbone, image) -> FeaturePyramid:
    return backbone(image)


def coord_channels(h: int, w: int) -> np.ndarray:
    """(h, w, 2) planes of x then y in [-1, 1]; a length-1 axis maps to 0."""
    xs = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


class CoordConv(Module):
    """Concatenate normalized coordinates, then 1x1 conv back to C channels."""

    def __init__(self, rng: np.random.Generator, channels: int):
        self.conv = Conv2d(rng, channels + 2, channels, k=1)

    def __call__(self, f: Tensor) -> Tensor:
        B, H, W, _ = f.shape
        coords = np.broadcast_to(coord_channels(H, W), (B, H, W, 2))
        return self.conv(T.concat([f, Tensor(coords)], axis=-1))


def inject_coords(f: Tensor, coordconv: CoordConv) -> Tensor:
    return coordconv(f)
