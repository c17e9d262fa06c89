"""Parameter containers and the few layers the detector is built from."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def Param(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Attributes holding grad-requiring Tensors are parameters; Module
    attributes (and lists of Modules) are children.  Names are ``a/b/c``."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "/"))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}/{i}/"))
        return out

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters(prefix).items()}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        params = self.named_parameters(prefix)
        missing = sorted(set(params) - set(state))
        bad = [f"{k}: {state[k].shape} != {p.shape}" for k, p in params.items()
               if k in state and state[k].shape != p.shape]
        if missing or bad:
            raise ValueError("incompatible checkpoint; missing=" + ",".join(missing) + " shape diff=" + "; ".join(bad))
        for k, p in params.items():
            p.data = np.array(state[k], dtype=np.float64)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, zero: bool = False):
        self.weight = Param(np.zeros((n_in, n_out)) if zero else uniform_init(rng, (n_in, n_out), n_in))
        self.bias = Param(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int = 3, stride: int = 1,
                 zero: bool = False):
        shape = (k, k, c_in, c_out)
        self.weight = Param(np.zeros(shape) if zero else uniform_init(rng, shape, k * k * c_in))
        self.bias = Param(np.zeros(c_out))
        self.stride = stride
        self.padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, n: int, eps: float = 1e-5):
        self.gamma = Param(np.ones(n))
        self.beta = Param(np.zeros(n))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)
