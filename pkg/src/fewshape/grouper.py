"""Feature grouping: position embeddings, transformer encoder, prediction heads."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .numerics import tensor as T
from .numerics.module import LayerNorm, Linear, Module, Param
from .numerics.tensor import Tensor
from .sampler import SCORE_DIVISORS, SampledFeatureSet

Mode = Literal["rbox", "bezier"]
MAX_FREQ = 16.0
SIGMOID_EPS = 1e-12
PRIOR_CELLS = 1.5      # reference box sqrt-area, in cells of the token's own map
# An anisotropic reference: for a square box the Gaussian ignores the angle,
# so theta would start with exactly zero gradient.
PRIOR_ASPECT = 3.0


def sinusoid_frequencies(n: int) -> np.ndarray:
    """``n`` angular frequencies, geometric from pi to ``MAX_FREQ * pi``."""
    if n == 1:
        return np.array([math.pi])
    return math.pi * MAX_FREQ ** (np.arange(n) / (n - 1))


def sinusoid_embedding(pos: np.ndarray, channels: int) -> np.ndarray:
    """(..., 2) normalized (x, y) in [0, 1] -> (..., channels).

    The first half encodes x, the second y; within each half sin and cos of
    the same frequency sit next to each other.
    """
    if channels % 4:
        raise ValueError(f"channels must be divisible by 4, got {channels}")
    freqs = sinusoid_frequencies(channels // 4)
    halves = []
    for axis in range(2):
        arg = pos[..., axis: axis + 1] * freqs
        halves.append(np.stack([np.sin(arg), np.cos(arg)], -1).reshape(arg.shape[:-1] + (-1,)))
    return np.concatenate(halves, -1)


def token_strides(s: SampledFeatureSet, image_size: tuple[int, int]) -> np.ndarray:
    """Cell size in pixels, (x, y), of every token's map, shape (B, N, 2)."""
    H, W = image_size
    h = np.array([H / shp[0] for shp in s.map_shapes])[s.scale]
    w = np.array([W / shp[1] for shp in s.map_shapes])[s.scale]
    return np.stack([w, h], -1)


def token_positions(s: SampledFeatureSet) -> np.ndarray:
    """Normalized cell-centre (x, y) of every token, shape (B, N, 2)."""
    h = np.array([shp[0] for shp in s.map_shapes], dtype=np.float64)[s.scale]
    w = np.array([shp[1] for shp in s.map_shapes], dtype=np.float64)[s.scale]
    return np.stack([(s.cols + 0.5) / w, (s.rows + 0.5) / h], -1)


@dataclass
class EmbeddedTokens:
    features: Tensor          # (B, N, C)
    sampled: SampledFeatureSet


class PositionEmbedding(Module):
    def __init__(self, rng: np.random.Generator, channels: int, n_scales: int = 3):
        self.scale_embed = Param(rng.normal(0.0, 0.1, size=(n_scales, channels)))
        self.channels = channels

    def __call__(self, s: SampledFeatureSet) -> EmbeddedTokens:
        fixed = sinusoid_embedding(token_positions(s), self.channels)
        learned = T.getitem(self.scale_embed, s.scale)
        return EmbeddedTokens(s.features + fixed + learned, s)


def embed_positions(s: SampledFeatureSet, embed: PositionEmbedding) -> EmbeddedTokens:
    return embed(s)


class MultiHeadAttention(Module):
    def __init__(self, rng: np.random.Generator, channels: int, heads: int):
        if channels % heads:
            raise ValueError(f"width {channels} not divisible by {heads} heads")
        self.q = Linear(rng, channels, channels)
        self.k = Linear(rng, channels, channels)
        self.v = Linear(rng, channels, channels)
        self.out = Linear(rng, channels, channels)
        self.heads = heads
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        B, N, C = x.shape
        return T.transpose(T.reshape(x, (B, N, self.heads, C // self.heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor) -> Tensor:
        B, N, C = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        logits = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(C // self.heads))
        att = T.softmax(logits)
        self.last_weights = att.data
        o = T.matmul(att, v)                                  # (B, h, N, d)
        o = T.reshape(T.transpose(o, (0, 2, 1, 3)), (B, N, C))
        return self.out(o)


class EncoderLayer(Module):
    def __init__(self, rng: np.random.Generator, channels: int, heads: int, ffn: int):
        self.attn = MultiHeadAttention(rng, channels, heads)
        self.norm1 = LayerNorm(channels)
        self.fc1 = Linear(rng, channels, ffn)
        self.fc2 = Linear(rng, ffn, channels)
        self.norm2 = LayerNorm(channels)

    def __call__(self, x: Tensor) -> Tensor:
        x = self.norm1(x + self.attn(x))
        return self.norm2(x + self.fc2(T.relu(self.fc1(x))))


class Encoder(Module):
    def __init__(self, rng: np.random.Generator, channels: int, layers: int = 4, heads: int = 4,
                 ffn: int | None = None):
        self.layers = [EncoderLayer(rng, channels, heads, ffn or 4 * channels) for _ in range(layers)]

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        for layer in self.layers:
            x = layer(x)
        return x


def encode(tokens: EmbeddedTokens, stack: Encoder) -> Tensor:
    return stack(tokens.features)


def attention_cost(n: int, width: int) -> dict[str, int]:
    """Multiply-accumulate count of one attention layer over ``n`` tokens."""
    if n < 1:
        raise ValueError("token count must be at least 1")
    proj = 3 * n * width * width
    quad = 2 * n * n * width
    out = n * width * width
    return {"projections": proj, "quadratic": quad, "output": out, "total": proj + quad + out}


def dense_attention_cost(map_sizes: Sequence[tuple[int, int]], width: int) -> dict[str, int]:
    """Per-scale dense alternative: every cell of every map attends within its scale."""
    total = {"projections": 0, "quadratic": 0, "output": 0, "total": 0}
    for h, w in map_sizes:
        for key, val in attention_cost(h * w, width).items():
            total[key] += val
    return total


# -------------------------------------------------------------------- heads

@dataclass
class DetectionSet:
    """Per-token outputs.  ``boxes`` are decoded (x, y, w, h, θ) in pixels."""
    probs: Tensor                     # (B, N)
    raw_boxes: Tensor                 # (B, N, 5 or 4) sigmoid outputs
    image_size: tuple[int, int]
    beziers: Tensor | None = None     # (B, N, 16) pixels
    mode: Mode = "rbox"

    @property
    def boxes(self) -> np.ndarray:
        return decode_boxes(self.raw_boxes.data, self.image_size)

    def __len__(self) -> int:
        return self.probs.shape[1]


def decode_boxes(raw: np.ndarray, image_size: tuple[int, int]) -> np.ndarray:
    H, W = image_size
    out = np.empty(raw.shape[:-1] + (5,))
    out[..., 0] = raw[..., 0] * W
    out[..., 1] = raw[..., 1] * H
    out[..., 2] = raw[..., 2] * W
    out[..., 3] = raw[..., 3] * H
    out[..., 4] = (raw[..., 4] - 0.5) * math.pi if raw.shape[-1] == 5 else 0.0
    return out


def encode_boxes(boxes: np.ndarray, image_size: tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`decode_boxes` for θ in (-pi/2, pi/2)."""
    H, W = image_size
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.stack([boxes[..., 0] / W, boxes[..., 1] / H, boxes[..., 2] / W, boxes[..., 3] / H,
                     boxes[..., 4] / math.pi + 0.5], -1)


def decode_boxes_tensor(raw: Tensor, image_size: tuple[int, int]) -> Tensor:
    H, W = image_size
    if raw.shape[-1] == 5:
        scale = np.array([W, H, W, H, math.pi], dtype=np.float64)
        shift = np.array([0, 0, 0, 0, -0.5 * math.pi])
    else:
        scale = np.array([W, H, W, H], dtype=np.float64)
        shift = np.zeros(4)
    return raw * scale + shift


def _logit(p: np.ndarray) -> np.ndarray:
    return np.log(p / (1.0 - p))


def _open_sigmoid(x: Tensor) -> Tensor:
    # float64 sigmoid rounds to exactly 0 or 1 past |x| ~ 37; keep outputs strictly inside
    return T.clip(T.sigmoid(x), SIGMOID_EPS, 1.0 - SIGMOID_EPS)


class MLPHead(Module):
    def __init__(self, rng: np.random.Generator, channels: int, n_out: int, zero: bool = False):
        self.fc1 = Linear(rng, channels, channels, zero=zero)
        self.fc2 = Linear(rng, channels, n_out, zero=zero)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class Heads(Module):
    def __init__(self, rng: np.random.Generator, channels: int, mode: Mode = "rbox", zero: bool = False):
        if mode not in ("rbox", "bezier"):
            raise ValueError(f"unknown head mode {mode!r}")
        self.cls = MLPHead(rng, channels, 1, zero)
        self.box = MLPHead(rng, channels, 5 if mode == "rbox" else 4, zero)
        if mode == "bezier":
            self.bezier = MLPHead(rng, channels, 16, zero)
        self.mode = mode

    def __call__(self, encoded: Tensor, image_size: tuple[int, int],
                 sampled: SampledFeatureSet | None = None) -> DetectionSet:
        B, N, _ = encoded.shape
        probs = T.reshape(_open_sigmoid(self.cls(encoded)), (B, N))
        centers = np.full((B, N, 2), 0.5) if sampled is None else token_positions(sampled)
        # reference box: the token's cell centre, sized to its map's stride
        ref = np.zeros((B, N, self.box.fc2.bias.shape[0]))
        ref[..., :2] = _logit(centers)
        if sampled is not None:
            side = PRIOR_CELLS * token_strides(sampled, image_size) / np.array(image_size[::-1], dtype=np.float64)
            side *= np.array([math.sqrt(PRIOR_ASPECT), 1.0 / math.sqrt(PRIOR_ASPECT)])
            ref[..., 2:4] = _logit(np.minimum(side, 0.9))
        raw = _open_sigmoid(self.box(encoded) + ref)
        beziers = None
        if self.mode == "bezier":
            H, W = image_size
            centers_px = np.tile(centers * np.array([W, H]), 8)          # (B, N, 16) as x0,y0,x1,y1..
            beziers = self.bezier(encoded) * np.tile(np.array([W, H], dtype=np.float64), 8) + centers_px
        return DetectionSet(probs, raw, image_size, beziers, self.mode)


def predict_heads(encoded: Tensor, heads: Heads, image_size: tuple[int, int],
                  sampled: SampledFeatureSet | None = None) -> DetectionSet:
    return heads(encoded, image_size, sampled)


class Grouper(Module):
    def __init__(self, rng: np.random.Generator, channels: int, mode: Mode = "rbox", layers: int = 4,
                 heads: int = 4, ffn: int | None = None):
        self.embed = PositionEmbedding(rng, channels, len(SCORE_DIVISORS))
        self.encoder = Encoder(rng, channels, layers, heads, ffn)
        self.heads = Heads(rng, channels, mode)

    def __call__(self, s: SampledFeatureSet, image_size: tuple[int, int]) -> DetectionSet:
        tokens = self.embed(s)
        return self.heads(self.encoder(tokens.features), image_size, s)

