"""Parameter containers and the small conv building blocks shared by the
denoiser and the classifier."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .data_io import read_checkpoint, write_checkpoint
from .tensor import Tensor


class Module:
    """Attribute-walking parameter registry.

    Parameters are ``Tensor`` attributes with ``requires_grad``; submodules
    are ``Module`` attributes or lists of them. Names are dotted paths.
    """

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key in sorted(vars(self)):
            val = getattr(self, key)
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float32)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def save(self, path, meta: dict | None = None) -> None:
        write_checkpoint(path, self.state_dict(), meta)


def load_params(module: Module, path) -> dict:
    tensors, meta = read_checkpoint(path)
    module.load_state_dict(tensors)
    return meta


def _uniform(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, scale: float = 1.0):
        bound = scale / math.sqrt(d_in)
        self.weight = _uniform(rng, (d_in, d_out), bound)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, scale: float = 1.0):
        bound = scale / math.sqrt(c_in * k * k)
        self.weight = _uniform(rng, (c_out, c_in, k, k), bound)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias)


class ResBlock(Module):
    """x + conv(silu(conv(silu(x)) + proj(emb)))."""

    def __init__(self, channels: int, emb_dim: int, rng: np.random.Generator):
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.proj = Linear(emb_dim, channels, rng)
        self.conv2 = Conv2d(channels, channels, 3, rng, scale=0.5)

    def __call__(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(T.silu(x))
        h = T.add_channel_vector(h, self.proj(emb))
        h = self.conv2(T.silu(h))
        return x + h


def timestep_features(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal timestep features, [N] -> [N, dim]."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(np.float32)


class TimeMLP(Module):
    """Sinusoidal features -> Linear -> SiLU -> Linear."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.fc1 = Linear(dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)

    def __call__(self, t: np.ndarray) -> Tensor:
        return self.fc2(T.silu(self.fc1(Tensor(timestep_features(t, self.dim)))))
