"""Variance schedule and forward (noising) process."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule. Arrays are indexed by timestep, so index 0 is the
    clean-data convention (beta=0, alpha_bar=1) and 1..T are the real steps."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def check_t(self, t: int, lo: int = 1) -> int:
        t = int(t)
        if not lo <= t <= self.T:
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")
        return t

    def alpha_bar(self, t: int) -> float:
        """alpha_bar_t, with alpha_bar_0 := 1."""
        return float(self.alpha_bars[self.check_t(t, lo=0)])

    def beta(self, t: int) -> float:
        return float(self.betas[self.check_t(t)])


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = np.zeros(T + 1, dtype=np.float64)
    betas[1:] = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    ab = sched.alpha_bar(sched.check_t(t))
    out = np.sqrt(ab) * x0.astype(np.float64) + np.sqrt(1.0 - ab) * eps.astype(np.float64)
    return out.astype(np.float32)


def q_sample_iterative(x0: np.ndarray, t: int, rng: np.random.Generator, sched: NoiseSchedule) -> np.ndarray:
    """Apply the one-step kernel t times, x_s = sqrt(1-beta_s) x_{s-1} + sqrt(beta_s) z."""
    t = sched.check_t(t)
    x = np.asarray(x0, dtype=np.float64)
    for s in range(1, t + 1):
        beta = sched.betas[s]
        z = rng.standard_normal(x.shape)
        x = np.sqrt(1.0 - beta) * x + np.sqrt(beta) * z
    return x.astype(np.float32)
