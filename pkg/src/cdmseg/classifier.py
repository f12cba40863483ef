"""Noise-aware classifiers p(y | x_t) that supply guidance gradients."""

from __future__ import annotations

import logging
from typing import Protocol, runtime_checkable

import numpy as np
from scipy.special import logsumexp

from . import tensor as T
from .data_io import make_rng
from .layers import Conv2d, Linear, Module, ResBlock, TimeMLP
from .schedule import NoiseSchedule, q_sample
from .tensor import Tensor
from .training import AdamW

log = logging.getLogger(__name__)


@runtime_checkable
class NoisyClassifier(Protocol):
    sched: NoiseSchedule

    def log_prob(self, x_t: np.ndarray, t, y: int) -> np.ndarray: ...

    def input_gradient(self, x_t: np.ndarray, t, y: int) -> np.ndarray: ...


def _labels(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.ndim == 0:
        y = np.full(n, int(y), dtype=np.int64)
    if y.shape != (n,) or np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0/1, scalar or one per sample")
    return y


class AnalyticClassifier:
    """Bayes posterior under x_t | y ~ N(sqrt(ab_t) mu_y, (ab_t sigma_y^2 + 1 - ab_t) I)."""

    def __init__(self, mu0, mu1, sigma0: float, sigma1: float, sched: NoiseSchedule, prior1: float = 0.5):
        if not 0 < prior1 < 1:
            raise ValueError("prior must lie in (0, 1)")
        if sigma0 < 0 or sigma1 < 0:
            raise ValueError("sigma must be >= 0")
        self.mu = (np.asarray(mu0, dtype=np.float64), np.asarray(mu1, dtype=np.float64))
        self.sigma = (float(sigma0), float(sigma1))
        self.log_prior = (np.log1p(-prior1), np.log(prior1))
        self.sched = sched

    def _per_class(self, x_t, t):
        x = np.asarray(x_t, dtype=np.float64)
        ab = self.sched.alpha_bar(self.sched.check_t(t))
        d = x[0].size
        terms, resid, vs = [], [], []
        for k in (0, 1):
            v = ab * self.sigma[k] ** 2 + 1.0 - ab
            r = x - np.sqrt(ab) * self.mu[k]
            ll = -0.5 * (r * r).reshape(len(x), -1).sum(axis=1) / v - 0.5 * d * np.log(2 * np.pi * v)
            terms.append(ll + self.log_prior[k])
            resid.append(r)
            vs.append(v)
        joint = np.stack(terms, axis=1)  # [N, 2]
        return joint - logsumexp(joint, axis=1, keepdims=True), resid, vs

    def log_prob(self, x_t, t, y) -> np.ndarray:
        logp, _, _ = self._per_class(x_t, t)
        y = _labels(y, len(logp))
        return logp[np.arange(len(logp)), y]

    def input_gradient(self, x_t, t, y) -> np.ndarray:
        """grad log p(y|x) = -(x - m_y)/v_y + sum_k p(k|x) (x - m_k)/v_k."""
        logp, resid, vs = self._per_class(x_t, t)
        y = _labels(y, len(logp))
        post = np.exp(logp)
        shape = (-1,) + (1,) * (np.ndim(x_t) - 1)
        grad = np.zeros_like(resid[0])
        for k in (0, 1):
            own = (y == k).astype(np.float64).reshape(shape)
            grad += (post[:, k].reshape(shape) - own) * resid[k] / vs[k]
        return grad.astype(np.float32)


class ConvClassifier(Module):
    """Encoder half of the denoiser, global average pool and a 2-way linear head."""

    def __init__(self, in_channels: int = 1, channels: int = 32, emb_dim: int = 64, seed: int = 0,
                 sched: NoiseSchedule | None = None):
        rng = make_rng(seed, 0xC1A)
        self.sched = sched
        self.time = TimeMLP(emb_dim, rng)
        self.in_conv = Conv2d(in_channels, channels, 3, rng)
        self.down_block = ResBlock(channels, emb_dim, rng)
        self.mid_block = ResBlock(channels, emb_dim, rng)
        self.head = Linear(channels, 2, rng)

    def logits(self, x: Tensor, t) -> Tensor:
        n = x.shape[0]
        ts = np.asarray(t, dtype=np.int64)
        if ts.ndim == 0:
            ts = np.full(n, int(ts))
        emb = self.time(ts)
        h = self.down_block(self.in_conv(x), emb)
        h = self.mid_block(T.avg_pool2(h), emb)
        return self.head(T.spatial_mean(T.silu(h)))

    def _check(self, x_t, t) -> np.ndarray:
        x = np.asarray(x_t, dtype=T.DTYPE)
        if x.ndim != 4:
            raise ValueError(f"expected [N,C,H,W] input, got {x.shape}")
        if self.sched is not None:
            for s in np.unique(np.asarray(t)):
                self.sched.check_t(s)
        return x

    def log_prob(self, x_t, t, y) -> np.ndarray:
        x = self._check(x_t, t)
        with T.no_grad():
            logp = T.log_softmax(self.logits(Tensor(x), t)).data
        y = _labels(y, len(x))
        return logp[np.arange(len(x)), y].astype(np.float64)

    def predict_label(self, x_t, t) -> np.ndarray:
        x = self._check(x_t, t)
        with T.no_grad():
            return self.logits(Tensor(x), t).data.argmax(axis=1)

    def input_gradient(self, x_t, t, y) -> np.ndarray:
        x = self._check(x_t, t)
        y = _labels(y, len(x))
        xt = Tensor(x, requires_grad=True)
        T.clear_tape()
        total = T.tsum(T.pick(T.log_softmax(self.logits(xt, t)), y))
        T.backward(total)
        grad = xt.grad
        self.zero_grad()
        return grad


def classifier_loss(clf: ConvClassifier, x_t: np.ndarray, t: np.ndarray, y: np.ndarray) -> Tensor:
    """Mean cross-entropy."""
    logp = T.log_softmax(clf.logits(Tensor(x_t), t))
    return T.mean(T.pick(logp, y)) * -1.0


def train_conv_classifier(
    images: np.ndarray,
    labels: np.ndarray,
    sched: NoiseSchedule,
    steps: int,
    *,
    max_t: int | None = None,
    lr: float = 1e-3,
    weight_decay: float = 0.0,
    batch: int = 16,
    seed: int = 0,
    channels: int = 32,
    emb_dim: int = 64,
    log_every: int = 100,
) -> tuple[ConvClassifier, list[tuple[int, float]]]:
    """Cross-entropy on q_sample-noised images with t ~ Uniform{1..max_t}."""
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    max_t = sched.T if max_t is None else sched.check_t(max_t)
    clf = ConvClassifier(images.shape[1], channels, emb_dim, seed=seed, sched=sched)
    opt = AdamW(clf.parameters(), lr=lr, weight_decay=weight_decay)
    rng = make_rng(seed, 0xC1A5)
    curve = []
    for it in range(1, steps + 1):
        idx = rng.integers(0, len(images), size=batch)
        t = rng.integers(1, max_t + 1, size=batch)
        eps = rng.standard_normal(images[idx].shape).astype(np.float32)
        x_t = np.stack([q_sample(images[j], int(tt), e, sched) for j, tt, e in zip(idx, t, eps)])
        loss = classifier_loss(clf, x_t, t, labels[idx])
        val = loss.item()
        if not np.isfinite(val):
            raise FloatingPointError(f"classifier loss diverged at iteration {it}")
        T.backward(loss)
        opt.step()
        clf.zero_grad()
        if it % log_every == 0 or it == steps:
            curve.append((it, val))
            log.info("classifier it=%d loss=%.4f", it, val)
    return clf, curve
