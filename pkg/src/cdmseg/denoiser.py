"""Noise predictors eps(x_t, t, e) and the class-condition embedding."""

from __future__ import annotations

from typing import Protocol, runtime_checkable

import numpy as np

from . import tensor as T
from .data_io import make_rng
from .layers import Conv2d, Module, ResBlock, TimeMLP
from .schedule import NoiseSchedule
from .tensor import Tensor


@runtime_checkable
class EpsilonModel(Protocol):
    embedding: "ConditionEmbedding"

    def predict(self, x_t: np.ndarray, t, e: np.ndarray) -> np.ndarray: ...


def _as_batch(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 4:
        raise ValueError(f"expected [N,C,H,W] input, got shape {x.shape}")
    return x


def _timesteps(t, n: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if t.ndim == 0:
        t = np.full(n, int(t), dtype=np.int64)
    if t.shape != (n,):
        raise ValueError(f"need a scalar or {n} timesteps, got shape {t.shape}")
    return t


class ConditionEmbedding(Module):
    """Two-row table with rows f(y0), f(y1).

    ``interpolate(tau)`` moves from f(y1) towards f(y0): tau=0 is f(y1) and
    tau=1 is f(y0), both exactly.
    """

    def __init__(self, table: np.ndarray, trainable: bool = False):
        table = np.asarray(table, dtype=np.float32)
        if table.ndim != 2 or table.shape[0] != 2:
            raise ValueError("embedding table must be 2 x n")
        if np.array_equal(table[0], table[1]):
            raise ValueError("embedding rows must differ")
        self.table = Tensor(table, requires_grad=trainable)

    @classmethod
    def random(cls, n: int, seed: int = 0, trainable: bool = True) -> "ConditionEmbedding":
        """Unit-norm random rows."""
        rows = make_rng(seed, 0xE1B).standard_normal((2, n))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        return cls(rows, trainable=trainable)

    @classmethod
    def one_hot(cls) -> "ConditionEmbedding":
        return cls(np.eye(2), trainable=False)

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def embed(self, y: int) -> np.ndarray:
        if y not in (0, 1) or isinstance(y, bool):
            raise ValueError(f"label must be 0 or 1, got {y!r}")
        return self.table.data[int(y)].copy()

    def interpolate(self, tau: float) -> np.ndarray:
        """(1 - tau) f(y1) + tau f(y0), written as f(y1) + tau (f(y0) - f(y1))."""
        f0 = self.table.data[0]
        f1 = self.table.data[1]
        return (f1 + np.float32(tau) * (f0 - f1)).astype(np.float32)

    def lookup(self, labels: np.ndarray) -> Tensor:
        """Differentiable row lookup for a batch of labels."""
        onehot = np.eye(2, dtype=np.float32)[np.asarray(labels, dtype=np.int64)]
        return T.matmul(Tensor(onehot), self.table)


class AnalyticGaussianDenoiser:
    """Exact MMSE noise predictor when x0 | y ~ N(mu_y, sigma_y^2 I).

    With x_t = a x0 + b eps (a = sqrt(ab_t), b = sqrt(1 - ab_t)), x_t and eps
    are jointly Gaussian and

        E[eps | x_t] = b (x_t - a mu) / (a^2 sigma^2 + b^2).

    The embedding table is fixed to f(y0) = [1, 0], f(y1) = [0, 1]; an
    embedding decodes to a mixing weight c = e[0] and the class statistics
    are interpolated as mu_c = mu1 + c (mu0 - mu1), likewise sigma^2.
    """

    def __init__(self, mu0, mu1, sigma0: float, sigma1: float, sched: NoiseSchedule):
        self.mu0 = np.asarray(mu0, dtype=np.float64)
        self.mu1 = np.asarray(mu1, dtype=np.float64)
        if self.mu0.shape != self.mu1.shape:
            raise ValueError("class means must share a shape")
        if sigma0 < 0 or sigma1 < 0:
            raise ValueError("sigma must be >= 0")
        self.sigma0 = float(sigma0)
        self.sigma1 = float(sigma1)
        self.sched = sched
        self.embedding = ConditionEmbedding.one_hot()

    def decode(self, e: np.ndarray, n: int) -> np.ndarray:
        e = np.asarray(e, dtype=np.float64)
        if e.ndim == 1:
            e = np.broadcast_to(e, (n, e.shape[0]))
        if e.shape != (n, 2):
            raise ValueError(f"embedding of shape {e.shape} is not decodable (need 2 components)")
        c = e[:, 0]
        if np.any(np.abs(e.sum(axis=1) - 1.0) > 1e-5) or np.any(c < -1e-6) or np.any(c > 1 + 1e-6):
            raise ValueError("embedding is not an interpolation of the class rows")
        return c

    def class_stats(self, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        c4 = c.reshape(-1, 1, 1, 1)
        mu = self.mu1[None] + c4 * (self.mu0 - self.mu1)[None]
        var = self.sigma1**2 + c4 * (self.sigma0**2 - self.sigma1**2)
        return mu, var

    def predict(self, x_t, t, e) -> np.ndarray:
        x = _as_batch(x_t)
        if x.shape[1:] != self.mu0.shape:
            raise ValueError(f"input {x.shape[1:]} does not match mean shape {self.mu0.shape}")
        n = x.shape[0]
        ts = _timesteps(t, n)
        for s in np.unique(ts):
            self.sched.check_t(s)
        ab = self.sched.alpha_bars[ts].reshape(-1, 1, 1, 1)
        mu, var = self.class_stats(self.decode(e, n))
        out = np.sqrt(1.0 - ab) * (x - np.sqrt(ab) * mu) / (ab * var + 1.0 - ab)
        return out.astype(np.float32)


class TinyCondUNet(Module):
    """Conditional noise predictor at desk scale.

    in_conv -> res(full) -> avgpool -> res(half) -> upsample + skip -> res(full) -> out_conv.
    Each residual block adds a linear projection of (time embedding + condition
    embedding) to its feature maps.
    """

    def __init__(
        self,
        in_channels: int = 1,
        channels: int = 32,
        emb_dim: int = 64,
        seed: int = 0,
        sched: NoiseSchedule | None = None,
    ):
        rng = make_rng(seed, 0x0E7)
        self.in_channels = in_channels
        self.sched = sched
        self.embedding = ConditionEmbedding.random(emb_dim, seed=seed, trainable=True)
        self.time = TimeMLP(emb_dim, rng)
        self.in_conv = Conv2d(in_channels, channels, 3, rng)
        self.down_block = ResBlock(channels, emb_dim, rng)
        self.mid_block = ResBlock(channels, emb_dim, rng)
        self.up_block = ResBlock(channels, emb_dim, rng)
        self.out_conv = Conv2d(channels, in_channels, 3, rng, scale=0.5)

    def forward(self, x: Tensor, t: np.ndarray, e: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected [N,{self.in_channels},H,W] input, got {x.shape}")
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ValueError("spatial extents must be even")
        emb = self.time(_timesteps(t, x.shape[0])) + e
        h0 = self.down_block(self.in_conv(x), emb)
        h1 = self.mid_block(T.avg_pool2(h0), emb)
        h2 = self.up_block(T.upsample2(h1) + h0, emb)
        return self.out_conv(T.silu(h2))

    def forward_labels(self, x: Tensor, t: np.ndarray, labels: np.ndarray) -> Tensor:
        return self.forward(x, t, self.embedding.lookup(labels))

    def predict(self, x_t, t, e) -> np.ndarray:
        x = _as_batch(x_t)
        n = x.shape[0]
        e = np.asarray(e, dtype=np.float32)
        if e.ndim == 1:
            e = np.broadcast_to(e, (n, e.shape[0]))
        if e.shape != (n, self.embedding.dim):
            raise ValueError(f"embedding shape {e.shape} != ({n}, {self.embedding.dim})")
        if self.sched is not None:
            for s in np.unique(_timesteps(t, n)):
                self.sched.check_t(s)
        with T.no_grad():
            return self.forward(Tensor(x), t, Tensor(e)).data.copy()
