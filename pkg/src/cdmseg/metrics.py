"""Otsu binarisation and overlap / boundary-distance segmentation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


class EmptyMaskError(ValueError):
    """HD95 is undefined when either mask is empty."""


def _histogram(values: np.ndarray, bins: int):
    lo, hi = float(values.min()), float(values.max())
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return counts.astype(np.float64), edges


def otsu_threshold(saliency: np.ndarray, bins: int = 256) -> float:
    """Threshold maximising between-class variance over a ``bins``-bin histogram.

    The histogram spans the map's own range, so the resulting mask does not
    change under positive affine rescaling. Pixels ``>= threshold`` form the
    foreground; a constant map returns its constant value.
    """
    if bins < 2:
        raise ValueError("need at least 2 bins")
    v = np.asarray(saliency, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("empty map")
    if v.max() == v.min():
        return float(v[0])
    counts, edges = _histogram(v, bins)
    centers = 0.5 * (edges[:-1] + edges[1:])
    p = counts / counts.sum()
    w0 = np.cumsum(p)[:-1]
    m0 = np.cumsum(p * centers)[:-1]
    mt = float((p * centers).sum())
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mt * w0 - m0) ** 2 / (w0 * w1)
    between[(w0 <= 0) | (w1 <= 0)] = -np.inf
    k = int(np.argmax(between))
    return float(edges[k + 1])


def binarize(saliency: np.ndarray, threshold: float) -> np.ndarray:
    s = np.asarray(saliency)
    if s.max() == s.min():
        return np.zeros(s.shape, dtype=bool)
    return s >= threshold


def otsu_mask(saliency: np.ndarray, bins: int = 256) -> np.ndarray:
    return binarize(saliency, otsu_threshold(saliency, bins))


def average_otsu_masks(maps: list[np.ndarray], bins: int = 256) -> list[np.ndarray]:
    """Dataset-level variant: one threshold, the mean of the per-image Otsu thresholds."""
    thr = float(np.mean([otsu_threshold(m, bins) for m in maps]))
    return [binarize(m, thr) for m in maps]


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(pred, dtype=bool)
    b = np.asarray(gt, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(pred, gt) -> float:
    a, b = _pair(pred, gt)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def iou(pred, gt) -> float:
    a, b = _pair(pred, gt)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour outside the mask (image border counts as outside)."""
    m = np.asarray(mask, dtype=bool)
    return m & ~ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(m.ndim, 1))


def nearest_rank(values: np.ndarray, q: float) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    rank = max(1, math.ceil(q / 100.0 * v.size))
    return float(v[rank - 1])


def boundary_distances(pred, gt) -> np.ndarray:
    """Both directed boundary-to-boundary nearest distances, pooled."""
    a, b = _pair(pred, gt)
    if not a.any() or not b.any():
        raise EmptyMaskError("HD95 needs two nonempty masks")
    ba, bb = boundary(a), boundary(b)
    dt_to_b = ndimage.distance_transform_edt(~bb)
    dt_to_a = ndimage.distance_transform_edt(~ba)
    return np.concatenate([dt_to_b[ba], dt_to_a[bb]])


def hd95(pred, gt) -> float:
    """95th percentile (nearest rank) of the pooled symmetric boundary distances, in pixels."""
    return nearest_rank(boundary_distances(pred, gt), 95.0)


@dataclass
class ImageScore:
    image_id: str
    dice: float
    iou: float
    hd95: float | None  # None when skipped (empty prediction)


def score_image(image_id: str, pred, gt) -> ImageScore:
    pred, gt = _pair(pred, gt)
    try:
        h = hd95(pred, gt)
    except EmptyMaskError:
        h = None
    return ImageScore(image_id, dice(pred, gt), iou(pred, gt), h)


@dataclass
class RunSummary:
    """Per-protocol-run means."""

    dice: float
    iou: float
    hd95: float | None
    n_images: int
    n_hd95_skipped: int

    @classmethod
    def from_scores(cls, scores: list[ImageScore]) -> "RunSummary":
        hds = [s.hd95 for s in scores if s.hd95 is not None]
        return cls(
            dice=float(np.mean([s.dice for s in scores])) if scores else float("nan"),
            iou=float(np.mean([s.iou for s in scores])) if scores else float("nan"),
            hd95=float(np.mean(hds)) if hds else None,
            n_images=len(scores),
            n_hd95_skipped=len(scores) - len(hds),
        )


def mean_std(values) -> tuple[float, float]:
    """Mean and sample standard deviation (ddof=1; 0 for a single value)."""
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


@dataclass
class EvalReport:
    runs: dict[str, list[ImageScore]] = field(default_factory=dict)
    missing: list[str] = field(default_factory=list)

    def summaries(self) -> dict[str, RunSummary]:
        return {k: RunSummary.from_scores(v) for k, v in self.runs.items()}

    def aggregate(self) -> dict:
        sums = list(self.summaries().values())
        out = {}
        for key in ("dice", "iou", "hd95"):
            m, s = mean_std([getattr(r, key) for r in sums])
            out[key] = {"mean": m, "std": s}
        out["n_runs"] = len(sums)
        out["n_images"] = sum(r.n_images for r in sums)
        out["n_hd95_skipped"] = sum(r.n_hd95_skipped for r in sums)
        out["missing"] = list(self.missing)
        return out
