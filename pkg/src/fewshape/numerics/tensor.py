"""Reverse-mode autodiff over float64 numpy arrays.

A :class:`Tensor` wraps an ``np.ndarray`` and, while gradient recording is
enabled, remembers the op that produced it together with a closure mapping the
upstream gradient to gradients for each parent.  ``backward`` walks the graph
in reverse topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        backward(self)

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), bw, "div")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside ``[lo, hi]``."""
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clip")


def smooth_l1(a, beta: float = 1.0) -> Tensor:
    a = as_tensor(a)
    ad = np.abs(a.data)
    quad = ad < beta
    out = np.where(quad, 0.5 * a.data ** 2 / beta, ad - 0.5 * beta)
    return _result(out, (a,), lambda g: (g * np.where(quad, a.data / beta, np.sign(a.data)),), "smooth_l1")


# ----------------------------------------------------------------- reductions

def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), bw, "sum")


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(np.asarray(out).size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(np.asarray(out), (a,), bw, "mean")


def softmax(a) -> Tensor:
    """Softmax over the last axis (max-subtracted)."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (a,), bw, "softmax")


def layer_norm(a, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then optional affine ``gamma * x + beta``."""
    a = as_tensor(a)
    n = a.shape[-1]
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p is not None and as_tensor(p).shape != (n,):
            raise ShapeError(f"layer_norm: {name} shape {as_tensor(p).shape} != ({n},)")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    parents = [a]
    out = xhat
    if gamma is not None:
        gamma = as_tensor(gamma)
        out = out * gamma.data
        parents.append(gamma)
    if beta is not None:
        beta = as_tensor(beta)
        out = out + beta.data
        parents.append(beta)

    def bw(g):
        gx = g * gamma.data if gamma is not None else g
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        lead = tuple(range(g.ndim - 1))
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return _result(out, parents, bw, "layer_norm")


# ------------------------------------------------------------------ structure

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out), (a,), bw, "slice")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    ax = axis % out.ndim
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _result(out, ts, bw, "concat")


def gather_rows(a, index: np.ndarray) -> Tensor:
    """``a`` of shape (B, M, C), ``index`` (B, N) ints -> (B, N, C)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 3 or index.ndim != 2 or index.shape[0] != a.shape[0]:
        raise ShapeError(f"gather_rows: bad shapes {a.shape} / index {index.shape}")
    out = np.take_along_axis(a.data, index[:, :, None], axis=1)

    def bw(g):
        full = np.zeros_like(a.data)
        b = np.repeat(np.arange(a.shape[0]), index.shape[1])
        np.add.at(full, (b, index.ravel()), g.reshape(-1, a.shape[2]))
        return (full,)

    return _result(out, (a,), bw, "gather")


# ------------------------------------------------------------------- products

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # (..., K) @ (K, M): fold leading dims for a single GEMM
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _result(out, (a, b), bw, "matmul")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), bw, "matmul")


def _patches(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    s0, s1, s2, s3 = xp.strides
    return as_strided(xp, shape=(xp.shape[0], ho, wo, kh, kw, xp.shape[3]),
                      strides=(s0, s1 * stride, s2 * stride, s1, s2, s3), writeable=False)


def _conv_input_grad(g: np.ndarray, w: np.ndarray, padded_shape: tuple[int, ...], stride: int) -> np.ndarray:
    """Gradient w.r.t. the padded input.

    For stride 1 this is a full correlation of the output gradient with the
    flipped kernel, done as one im2col matmul.
    """
    B, ho, wo, co = g.shape
    kh, kw, C, _ = w.shape
    if kh == 1 and kw == 1:
        gxp = np.zeros(padded_shape)
        gxp[:, : stride * (ho - 1) + 1: stride, : stride * (wo - 1) + 1: stride, :] = g @ w[0, 0].T
        return gxp
    if stride > 1:
        # dilation would waste stride**2 work; scatter tap by tap instead
        gcols = (g.reshape(-1, co) @ w.reshape(-1, co).T).reshape(B, ho, wo, kh, kw, C)
        gxp = np.zeros(padded_shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i: i + stride * (ho - 1) + 1: stride, j: j + stride * (wo - 1) + 1: stride, :] += gcols[:, :, :, i, j, :]
        return gxp
    dh, dw = ho, wo
    gd = np.zeros((B, dh + 2 * (kh - 1), dw + 2 * (kw - 1), co))
    gd[:, kh - 1: kh - 1 + dh, kw - 1: kw - 1 + dw, :] = g
    lh, lw = dh + kh - 1, dw + kw - 1
    cols = _patches(gd, kh, kw, 1, lh, lw).reshape(-1, kh * kw * co)
    wf = w[::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, C)
    gxp = np.zeros(padded_shape)
    gxp[:, :lh, :lw, :] = (cols @ wf).reshape(B, lh, lw, C)
    return gxp


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """NHWC convolution. ``x`` (B,H,W,Cin), ``w`` (kh,kw,Cin,Cout), ``b`` (Cout,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: incompatible input {x.shape} and kernel {w.shape}")
    B, H, W, C = x.shape
    kh, kw, _, co = w.shape
    ho = (H + 2 * padding - kh) // stride + 1
    wo = (W + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    if kh == 1 and kw == 1:
        cols = xp[:, : stride * (ho - 1) + 1: stride, : stride * (wo - 1) + 1: stride, :]
        cols2 = cols.reshape(-1, C)
        out = (cols2 @ w.data[0, 0]).reshape(B, ho, wo, co)
    else:
        cols = _patches(xp, kh, kw, stride, ho, wo)
        cols2 = cols.reshape(-1, kh * kw * C)
        out = (cols2 @ w.data.reshape(-1, co)).reshape(B, ho, wo, co)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (co,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({co},)")
        out = out + b.data
        parents.append(b)

    def bw(g):
        g2 = g.reshape(-1, co)
        gw = (cols2.T @ g2).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gx = _conv_input_grad(g, w.data, xp.shape, stride)
            gx = gx[:, padding: padding + H, padding: padding + W, :] if padding else gx
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _result(out, parents, bw, "conv2d")


# ------------------------------------------------------------------- sampling

def upsample_nearest(x, factor: int = 2) -> Tensor:
    """NHWC nearest-neighbour upsampling by an integer factor."""
    x = as_tensor(x)
    B, H, W, C = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def bw(g):
        return (g.reshape(B, H, factor, W, factor, C).sum(axis=(2, 4)),)

    return _result(out, (x,), bw, "upsample")


def bilinear_sample(x, coords) -> Tensor:
    """Sample NHWC ``x`` at fractional (row, col) ``coords`` of shape (B, M, 2).

    Coordinates are in cell units and clamped to ``[0, H-1] x [0, W-1]``; the
    gradient with respect to a clamped coordinate is zero.
    """
    x, coords = as_tensor(x), as_tensor(coords)
    B, H, W, C = x.shape
    if coords.ndim != 3 or coords.shape[0] != B or coords.shape[2] != 2:
        raise ShapeError(f"bilinear_sample: coords shape {coords.shape} for input {x.shape}")
    cy = np.clip(coords.data[..., 0], 0.0, H - 1)
    cx = np.clip(coords.data[..., 1], 0.0, W - 1)
    y0 = np.floor(cy).astype(np.int64)
    x0 = np.floor(cx).astype(np.int64)
    fy = cy - y0
    fx = cx - x0
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    bidx = np.arange(B)[:, None]
    v00 = x.data[bidx, y0, x0]
    v01 = x.data[bidx, y0, x1]
    v10 = x.data[bidx, y1, x0]
    v11 = x.data[bidx, y1, x1]
    wy, wx = fy[..., None], fx[..., None]
    out = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11)
    inside_y = (coords.data[..., 0] >= 0) & (coords.data[..., 0] <= H - 1)
    inside_x = (coords.data[..., 1] >= 0) & (coords.data[..., 1] <= W - 1)

    def bw(g):
        gx = None
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            bb = np.broadcast_to(bidx, y0.shape)
            np.add.at(gx, (bb, y0, x0), g * ((1 - wy) * (1 - wx)))
            np.add.at(gx, (bb, y0, x1), g * ((1 - wy) * wx))
            np.add.at(gx, (bb, y1, x0), g * (wy * (1 - wx)))
            np.add.at(gx, (bb, y1, x1), g * (wy * wx))
        dy = ((1 - wx) * (v10 - v00) + wx * (v11 - v01))
        dx = ((1 - wy) * (v01 - v00) + wy * (v11 - v10))
        gc = np.stack([(g * dy).sum(-1) * inside_y, (g * dx).sum(-1) * inside_x], axis=-1)
        return gx, gc

    return _result(out, (x, coords), bw, "bilinear_sample")


# --------------------------------------------------------------- op registry

OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "conv2d": conv2d,
    "add": add,
    "mul": mul,
    "sub": sub,
    "div": div,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "sin": sin,
    "cos": cos,
    "pow": power,
    "sigmoid": sigmoid,
    "relu": relu,
    "clip": clip,
    "smooth_l1": smooth_l1,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "slice": getitem,
    "gather": gather_rows,
    "reshape": reshape,
    "reduce_sum": reduce_sum,
    "reduce_mean": reduce_mean,
    "transpose": transpose,
    "upsample": upsample_nearest,
    "bilinear_sample": bilinear_sample,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch by op name; ``forward_op("softmax", t)`` == ``softmax(t)``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)
