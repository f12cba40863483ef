"""Condition-gradient saliency maps (CDM / CG-CDM) and the reconstruction baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_io import make_rng
from .sampler import GuidanceConfig, ddim_step, guided_epsilon
from .schedule import NoiseSchedule, q_sample_iterative

NORMALIZATIONS = ("abs_minmax", "pos_minmax")


@dataclass
class SaliencyConfig:
    Q: int = 400
    R: int = 10
    tau: float = 0.95
    s: float = 10.0
    seed: int = 0
    normalization: str = "abs_minmax"

    def validate(self, T: int | None = None) -> None:
        if self.Q < 1:
            raise ValueError("Q must be >= 1")
        if T is not None and self.Q > T:
            raise ValueError(f"Q={self.Q} exceeds T={T}")
        if not 1 <= self.R <= self.Q:
            raise ValueError(f"R={self.R} must lie in [1, Q={self.Q}]")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau={self.tau} must lie in (0, 1]")
        if self.s < 0:
            raise ValueError("guidance scale must be >= 0")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}")

    @classmethod
    def scaled(cls, T: int, **overrides) -> "SaliencyConfig":
        """Defaults (Q=400, R=10 at T=1000) rescaled to keep Q/T and R/Q."""
        q = max(1, round(400 * T / 1000))
        r = max(1, round(10 * q / 400))
        return cls(**{"Q": q, "R": r, **overrides})


@dataclass
class SaliencyMap:
    raw: np.ndarray  # signed accumulator, [N,C,H,W]
    normalized: np.ndarray  # per image, in [0, 1]

    def image(self, i: int) -> np.ndarray:
        """2-d map for image i (channels averaged)."""
        return self.normalized[i].mean(axis=0)


def normalize_map(raw: np.ndarray, mode: str = "abs_minmax") -> np.ndarray:
    """Min-max normalise one map after taking magnitudes or clamping negatives."""
    raw = np.asarray(raw, dtype=np.float64)
    if mode == "abs_minmax":
        m = np.abs(raw)
    elif mode == "pos_minmax":
        m = np.maximum(raw, 0.0)
    else:
        raise ValueError(f"unknown normalization {mode!r}")
    lo, hi = m.min(), m.max()
    if hi <= lo:
        return np.zeros_like(m, dtype=np.float32)
    return ((m - lo) / (hi - lo)).astype(np.float32)


def _normalize_batch(raw: np.ndarray, mode: str) -> np.ndarray:
    return np.stack([normalize_map(r, mode) for r in raw])


def _noise_to(x: np.ndarray, Q: int, seed: int, sched: NoiseSchedule, offset: int) -> np.ndarray:
    """Noise each image with its own stream (seed, offset + i)."""
    return np.concatenate(
        [q_sample_iterative(x[i : i + 1], Q, make_rng(seed, offset + i), sched) for i in range(len(x))]
    )


def cdm_saliency(
    model,
    emb,
    x: np.ndarray,
    cfg: SaliencyConfig,
    sched: NoiseSchedule,
    classifier=None,
    index_offset: int = 0,
) -> SaliencyMap:
    """Accumulate (1/tau)(x_{t-1} - x'_{t-1}) over R DDIM steps from noise level Q.

    Both trajectories start from the same noised image. The primed one uses
    the embedding moved from f(y1) towards f(y0) by ``tau``. With a
    classifier and ``cfg.s > 0`` the two noise estimates are additionally
    guided towards y1 and y0 respectively.

    ``index_offset`` selects the per-image noise streams, so a batch split
    into chunks reproduces the unsplit result.
    """
    cfg.validate(sched.T)
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 4:
        raise ValueError(f"expected [N,C,H,W] images, got {x.shape}")
    e1 = emb.embed(1)
    e_tau = emb.interpolate(cfg.tau)
    g1 = GuidanceConfig(cfg.s, classifier, target=1)
    g0 = GuidanceConfig(cfg.s, classifier, target=0)

    x_t = _noise_to(x, cfg.Q, cfg.seed, sched, index_offset)
    x_p = x_t.copy()
    acc = np.zeros(x.shape, dtype=np.float64)
    inv_tau = 1.0 / cfg.tau
    for t in range(cfg.Q, cfg.Q - cfg.R, -1):
        eps1 = guided_epsilon(model, x_t, t, e1, g1)
        eps0 = guided_epsilon(model, x_p, t, e_tau, g0)
        x_t = ddim_step(x_t, t, eps1, sched)
        x_p = ddim_step(x_p, t, eps0, sched)
        acc += inv_tau * (x_t.astype(np.float64) - x_p.astype(np.float64))
    raw = acc.astype(np.float32)
    return SaliencyMap(raw=raw, normalized=_normalize_batch(raw, cfg.normalization))


def cg_diff_baseline(
    model,
    emb,
    x: np.ndarray,
    cfg: SaliencyConfig,
    sched: NoiseSchedule,
    classifier=None,
    index_offset: int = 0,
) -> SaliencyMap:
    """Noise to level Q, run the full DDIM chain back to t=0 conditioned on and
    guided towards y0, and diff the reconstruction against the input."""
    if classifier is None:
        raise ValueError("the reconstruction baseline needs a classifier")
    cfg.validate(sched.T)
    x = np.asarray(x, dtype=np.float32)
    e0 = emb.embed(0)
    g0 = GuidanceConfig(cfg.s, classifier, target=0)
    x_t = _noise_to(x, cfg.Q, cfg.seed, sched, index_offset)
    for t in range(cfg.Q, 0, -1):
        x_t = ddim_step(x_t, t, guided_epsilon(model, x_t, t, e0, g0), sched)
    raw = (x.astype(np.float64) - x_t).astype(np.float32)
    return SaliencyMap(raw=raw, normalized=_normalize_batch(raw, "abs_minmax"))


def compute_saliency(method: str, model, emb, x, cfg: SaliencyConfig, sched, classifier=None, index_offset=0):
    """Dispatch on method name: cdm, cg-cdm or cg-diff."""
    if method == "cdm":
        return cdm_saliency(model, emb, x, cfg, sched, None, index_offset)
    if method == "cg-cdm":
        if classifier is None:
            raise ValueError("cg-cdm needs a classifier")
        return cdm_saliency(model, emb, x, cfg, sched, classifier, index_offset)
    if method == "cg-diff":
        return cg_diff_baseline(model, emb, x, cfg, sched, classifier, index_offset)
    raise ValueError(f"unknown method {method!r}")
