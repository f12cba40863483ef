"""Reverse-process steps and classifier-guided noise estimates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schedule import NoiseSchedule


@dataclass
class GuidanceConfig:
    scale: float = 0.0
    classifier: object | None = None
    target: int = 1

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("guidance scale must be >= 0")

    @property
    def active(self) -> bool:
        return self.scale != 0 and self.classifier is not None


def ddim_step(x_t: np.ndarray, t: int, eps_hat: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic x_t -> x_{t-1}; alpha_bar_0 is taken as 1."""
    t = sched.check_t(t)
    x = np.asarray(x_t, dtype=np.float64)
    eps = np.asarray(eps_hat, dtype=np.float64)
    if x.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} != x shape {x.shape}")
    ab_t = sched.alpha_bars[t]
    ab_prev = sched.alpha_bars[t - 1]
    x0_pred = (x - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
    return (np.sqrt(ab_prev) * x0_pred + np.sqrt(1.0 - ab_prev) * eps).astype(np.float32)


def ddpm_ancestral_step(
    x_t: np.ndarray,
    t: int,
    eps_hat: np.ndarray,
    rng: np.random.Generator | None,
    sched: NoiseSchedule,
) -> np.ndarray:
    """Ancestral step with fixed variance beta_t; no noise at t=1 or when ``rng`` is None."""
    t = sched.check_t(t)
    x = np.asarray(x_t, dtype=np.float64)
    eps = np.asarray(eps_hat, dtype=np.float64)
    if x.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} != x shape {x.shape}")
    beta = sched.betas[t]
    mean = (x - beta / np.sqrt(1.0 - sched.alpha_bars[t]) * eps) / np.sqrt(sched.alphas[t])
    if t > 1 and rng is not None:
        mean = mean + np.sqrt(beta) * rng.standard_normal(x.shape)
    return mean.astype(np.float32)


def guided_epsilon(model, x_t: np.ndarray, t: int, e: np.ndarray, g: GuidanceConfig | None) -> np.ndarray:
    """eps(x_t, t, e) - s sqrt(1 - ab_t) grad_x log p(y | x_t)."""
    eps = model.predict(x_t, t, e)
    if g is None or not g.active:
        return eps
    grad = np.asarray(g.classifier.input_gradient(x_t, t, g.target))
    if grad.shape != eps.shape:
        raise ValueError(f"classifier gradient shape {grad.shape} != {eps.shape}")
    sched = g.classifier.sched
    coef = g.scale * np.sqrt(1.0 - sched.alpha_bar(t))
    return (eps.astype(np.float64) - coef * grad.astype(np.float64)).astype(np.float32)
