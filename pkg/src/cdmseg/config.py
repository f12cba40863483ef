"""``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry when known."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass
class RunConfig:
    # dataset
    dataset: str = "shapes"  # shapes | gaussian_blocks
    n_images: int = 200
    image_size: int = 32
    positive_fraction: float = 0.5
    test_fraction: float = 0.2
    # gaussian blocks
    block_top: int = 6
    block_left: int = 6
    block_height: int = 4
    block_width: int = 4
    background: float = 0.0
    delta: float = 1.0
    sigma: float = 0.1
    # shapes
    lesion_intensity: float = 1.0
    texture_amplitude: float = 0.25
    # schedule
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # saliency
    q_noise_level: int = 400
    r_steps: int = 10
    tau: float = 0.95
    guidance_scale: float = 10.0
    normalization: str = "abs_minmax"
    threshold_mode: str = "per_image"  # per_image | average
    protocol_repeats: int = 4
    # models
    analytic: bool = False
    channels: int = 32
    emb_dim: int = 64
    # training
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch: int = 8
    iters: int = 3000
    seed: int = 0
    checkpoint_interval: int = 0
    classifier_lr: float = 1e-3
    classifier_iters: int = 1500
    classifier_max_t: int = 0  # 0: use q_noise_level
    # paths ("" means: inside the run directory)
    data_dir: str = ""
    model_path: str = ""
    classifier_path: str = ""
    pred_dir: str = ""
    # execution
    workers: int = 1

    def validate(self) -> "RunConfig":
        checks = [
            ("dataset", self.dataset in ("shapes", "gaussian_blocks")),
            ("n_images", self.n_images >= 1),
            ("image_size", self.image_size >= 4),
            ("positive_fraction", 0.0 <= self.positive_fraction <= 1.0),
            ("test_fraction", 0.0 <= self.test_fraction <= 1.0),
            ("delta", self.delta != 0),
            ("sigma", self.sigma >= 0),
            ("T", self.T >= 1),
            ("beta_start", 0 < self.beta_start <= self.beta_end),
            ("beta_end", self.beta_end < 1),
            ("q_noise_level", 1 <= self.q_noise_level <= self.T),
            ("r_steps", 1 <= self.r_steps <= self.q_noise_level),
            ("tau", 0 < self.tau <= 1),
            ("guidance_scale", self.guidance_scale >= 0),
            ("normalization", self.normalization in ("abs_minmax", "pos_minmax")),
            ("threshold_mode", self.threshold_mode in ("per_image", "average")),
            ("protocol_repeats", self.protocol_repeats >= 1),
            ("lr", self.lr > 0),
            ("batch", self.batch >= 1),
            ("iters", self.iters >= 0),
            ("classifier_lr", self.classifier_lr > 0),
            ("classifier_max_t", 0 <= self.classifier_max_t <= self.T),
            ("workers", self.workers >= 1),
        ]
        for key, ok in checks:
            if not ok:
                raise ConfigError(f"invalid value for {key}: {getattr(self, key)!r}", key)
        return self

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validate()

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, val = (p.strip() for p in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"unknown key {key!r}", key)
            values[key] = _parse(key, val, types[key])
        return cls(**values).validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(key: str, val: str, typ: str):
    try:
        if typ == "bool":
            low = val.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(val)
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
        return val
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {val!r} as {typ}", key) from None
