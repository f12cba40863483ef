"""Noise-prediction training objective and AdamW."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data_io import make_rng
from .denoiser import TinyCondUNet
from .schedule import NoiseSchedule
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch: int = 16
    iters: int = 3000
    seed: int = 0
    checkpoint_interval: int = 0
    log_interval: int = 50

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.iters < 0:
            raise ValueError("iters must be >= 0")


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> list[np.ndarray]:
    """One AdamW update; returns the new parameter arrays (inputs untouched)."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p, dtype=np.float64) for p in params]
        state.v = [np.zeros_like(p, dtype=np.float64) for p in params]
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros_like(p) if g is None else np.asarray(g)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {i}")
        g = g.astype(np.float64)
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        p64 = p.astype(np.float64) * (1.0 - lr * weight_decay)
        p64 -= lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
        out.append(p64.astype(p.dtype))
    return out


class AdamW:
    def __init__(self, params: list[Tensor], lr: float, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.state = AdamState()

    def step(self) -> None:
        new = adamw_step(
            [p.data for p in self.params],
            [p.grad for p in self.params],
            self.state,
            self.lr,
            self.weight_decay,
        )
        for p, d in zip(self.params, new):
            p.data = d


def diffusion_loss(model, x0, y, t, eps, sched: NoiseSchedule):
    """Mean squared error between eps and the model's estimate from the noised input.

    Returns a differentiable scalar ``Tensor`` for trainable models and a
    float for anything else exposing ``predict``.
    """
    x0 = np.asarray(x0, dtype=np.float32)
    eps = np.asarray(eps, dtype=np.float32)
    if x0.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    n = x0.shape[0]
    ts = np.asarray(t, dtype=np.int64)
    ts = np.full(n, int(ts)) if ts.ndim == 0 else ts
    ys = np.asarray(y, dtype=np.int64)
    ys = np.full(n, int(ys)) if ys.ndim == 0 else ys
    for s in np.unique(ts):
        sched.check_t(s)
    ab = sched.alpha_bars[ts].reshape(-1, *([1] * (x0.ndim - 1)))
    x_t = (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(np.float32)
    if isinstance(model, TinyCondUNet):
        diff = Tensor(eps) - model.forward_labels(Tensor(x_t), ts, ys)
        return T.mean(diff * diff)
    emb = np.stack([model.embedding.embed(int(v)) for v in ys])
    pred = model.predict(x_t, ts, emb)
    return float(np.mean((eps.astype(np.float64) - pred) ** 2))


def train_diffusion(
    model: TinyCondUNet,
    images: np.ndarray,
    labels: np.ndarray,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    out_dir=None,
) -> tuple[TinyCondUNet, list[tuple[int, float]]]:
    """Minimise the noise-prediction loss with t ~ Uniform{1..T} per sample.

    Writes ``loss.csv`` and periodic ``ckpt_<iter>.ckpt`` files when ``out_dir`` is given.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    opt = AdamW(model.parameters(), cfg.lr, cfg.weight_decay)
    rng = make_rng(cfg.seed, 0xD1F)
    curve: list[tuple[int, float]] = []
    out = Path(out_dir) if out_dir is not None else None
    for it in range(1, cfg.iters + 1):
        idx = rng.integers(0, len(images), size=cfg.batch)
        t = rng.integers(1, sched.T + 1, size=cfg.batch)
        eps = rng.standard_normal((cfg.batch,) + images.shape[1:]).astype(np.float32)
        loss = diffusion_loss(model, images[idx], labels[idx], t, eps, sched)
        val = loss.item()
        if not np.isfinite(val):
            T.clear_tape()
            raise FloatingPointError(f"diffusion loss diverged at iteration {it}")
        T.backward(loss)
        opt.step()
        model.zero_grad()
        if it % cfg.log_interval == 0 or it == cfg.iters or it == 1:
            curve.append((it, val))
            log.info("diffusion it=%d loss=%.4f", it, val)
        if out is not None and cfg.checkpoint_interval and it % cfg.checkpoint_interval == 0:
            model.save(out / f"ckpt_{it:06d}.ckpt", {"kind": "unet", "iteration": it})
    if out is not None:
        write_loss_csv(out / "loss.csv", curve)
    return model, curve


def write_loss_csv(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for it, val in curve:
            w.writerow([it, repr(float(val))])
