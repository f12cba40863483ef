"""Deterministic RNG, synthetic datasets and on-disk formats.

File formats
------------
CDT1 tensor: ``b"CDT1"``, dtype code (u8, 1 = little-endian f32), rank (u8),
rank x u32 LE dims, row-major payload.

Checkpoint: ``b"CDCK"``, u32 LE header length, UTF-8 JSON header
``{"tensors": {name: {"offset", "shape"}}, "meta": {...}}``, then the
concatenated CDT1 records. Offsets are relative to the first record.

Manifest: JSON lines, one ``{"id", "image", "label", "mask", "split"}``
object per sample; paths are relative to the manifest's directory.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

CDT_MAGIC = b"CDT1"
CKPT_MAGIC = b"CDCK"
DTYPE_F32 = 1


class FormatError(ValueError):
    """Base class for malformed files."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class UnsupportedDtypeError(FormatError):
    pass


# ----------------------------------------------------------------------- RNG


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based Philox generator keyed by ``(seed, *stream)``.

    Independent streams (one per image, per worker, ...) are derived by
    appending indices rather than by offsetting the seed.
    """
    ss = np.random.SeedSequence([int(seed), *(int(s) for s in stream)])
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------- CDT1


def encode_cdt(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim > 255:
        raise FormatError("rank too large")
    header = CDT_MAGIC + struct.pack("<BB", DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_cdt(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; returns (array, end offset)."""
    if len(buf) - offset < 6:
        raise TruncatedError("header truncated")
    if buf[offset : offset + 4] != CDT_MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[offset:offset + 4])!r}")
    code, rank = struct.unpack_from("<BB", buf, offset + 4)
    if code != DTYPE_F32:
        raise UnsupportedDtypeError(f"dtype code {code}")
    pos = offset + 6
    if len(buf) - pos < 4 * rank:
        raise TruncatedError("dims truncated")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    nbytes = 4 * int(np.prod(dims, dtype=np.int64))
    if len(buf) - pos < nbytes:
        raise TruncatedError(f"payload truncated: need {nbytes} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims)
    return arr.astype(np.float32), pos + nbytes


def write_cdt(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_cdt(array))


def read_cdt(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_cdt(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after record")
    return arr


# ---------------------------------------------------------------- checkpoint


def write_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    payload = io.BytesIO()
    index = {}
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float32)
        index[name] = {"offset": payload.tell(), "shape": list(arr.shape)}
        payload.write(encode_cdt(arr))
    header = json.dumps({"tensors": index, "meta": meta or {}}, sort_keys=True).encode()
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<I", len(header)) + header + payload.getvalue())


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise TruncatedError("checkpoint header truncated")
    if buf[:4] != CKPT_MAGIC:
        raise BadMagicError(f"bad checkpoint magic {buf[:4]!r}")
    (hlen,) = struct.unpack_from("<I", buf, 4)
    if len(buf) < 8 + hlen:
        raise TruncatedError("checkpoint index truncated")
    header = json.loads(buf[8 : 8 + hlen].decode())
    base = 8 + hlen
    tensors = {}
    for name, entry in header["tensors"].items():
        arr, _ = decode_cdt(buf, base + entry["offset"])
        if list(arr.shape) != entry["shape"]:
            raise FormatError(f"shape mismatch for {name}")
        tensors[name] = arr
    return tensors, header.get("meta", {})


# ----------------------------------------------------------------------- PGM


def encode_pgm(image: np.ndarray, lo: float | None = None, hi: float | None = None) -> bytes:
    """8-bit binary PGM. Values are mapped linearly from [lo, hi] (default: data range)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-d image, got {img.shape}")
    lo = float(img.min()) if lo is None else lo
    hi = float(img.max()) if hi is None else hi
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pix = np.clip(np.rint((img - lo) * scale), 0, 255).astype(np.uint8)
    h, w = pix.shape
    return f"P5\n{w} {h}\n255\n".encode() + pix.tobytes()


def write_pgm(path, image: np.ndarray, lo: float | None = None, hi: float | None = None) -> None:
    Path(path).write_bytes(encode_pgm(image, lo, hi))


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(maxsplit=4)
    if parts[0] != b"P5":
        raise BadMagicError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = parts[4]
    if len(data) < w * h:
        raise TruncatedError("PGM payload truncated")
    return np.frombuffer(data[: w * h], dtype=np.uint8).reshape(h, w).copy()


# ------------------------------------------------------------------ datasets


@dataclass
class Sample:
    image: np.ndarray  # [C,H,W]
    label: int
    mask: np.ndarray  # [H,W] bool, empty for negatives


@dataclass
class GaussianBlockSpec:
    """Two classes, x0|y ~ N(mu_y, sigma^2 I); means differ by ``delta`` inside one rectangle."""

    height: int = 16
    width: int = 16
    block: tuple[int, int, int, int] = (6, 6, 4, 4)  # top, left, h, w
    background: float = 0.0
    delta: float = 1.0
    sigma0: float = 0.1
    sigma1: float = 0.1
    positive_fraction: float = 0.5

    def validate(self) -> None:
        top, left, bh, bw = self.block
        if bh < 1 or bw < 1 or top < 0 or left < 0 or top + bh > self.height or left + bw > self.width:
            raise ValueError(f"block {self.block} outside {self.height}x{self.width} image")
        if self.delta == 0:
            raise ValueError("delta must be nonzero")
        if self.sigma0 < 0 or self.sigma1 < 0:
            raise ValueError("sigma must be >= 0")

    def mask(self) -> np.ndarray:
        self.validate()
        top, left, bh, bw = self.block
        m = np.zeros((self.height, self.width), dtype=bool)
        m[top : top + bh, left : left + bw] = True
        return m

    def means(self) -> tuple[np.ndarray, np.ndarray]:
        """(mu0, mu1), each [1,H,W]."""
        mu0 = np.full((1, self.height, self.width), self.background, dtype=np.float32)
        mu1 = mu0 + np.float32(self.delta) * self.mask()[None].astype(np.float32)
        return mu0, mu1


def gen_gaussian_blocks(spec: GaussianBlockSpec, n: int, seed: int, labels=None) -> list[Sample]:
    """Sample ``n`` images; sample i draws from stream (seed, i).

    ``labels`` forces the class of each sample; otherwise each label is a
    Bernoulli(positive_fraction) draw.
    """
    spec.validate()
    if n < 1:
        raise ValueError("n must be >= 1")
    mu0, mu1 = spec.means()
    m = spec.mask()
    empty = np.zeros_like(m)
    out = []
    for i in range(n):
        rng = make_rng(seed, i)
        y = int(labels[i]) if labels is not None else int(rng.random() < spec.positive_fraction)
        mu, sig = (mu1, spec.sigma1) if y == 1 else (mu0, spec.sigma0)
        z = rng.standard_normal(mu.shape)
        x = (mu + sig * z).astype(np.float32) if sig > 0 else mu.copy()
        out.append(Sample(image=x, label=y, mask=m.copy() if y == 1 else empty.copy()))
    return out


@dataclass
class ShapesSpec:
    """Smooth textured background; positives carry one bright ellipse (the lesion)."""

    size: int = 32
    texture_amplitude: float = 0.25
    texture_smoothness: float = 3.0
    background: float = -0.5
    lesion_intensity: float = 1.0
    axis_range: tuple[float, float] = (3.0, 7.0)
    positive_fraction: float = 0.5
    max_tries: int = 100

    def validate(self) -> None:
        lo, hi = self.axis_range
        if self.size < 4 or not 0 < lo <= hi:
            raise ValueError("invalid shapes spec")
        if 2 * hi + 2 > self.size:
            raise ValueError("ellipse axes cannot fit in the image")


def _ellipse(size: int, cy: float, cx: float, ay: float, ax: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def gen_shapes(spec: ShapesSpec, n: int, seed: int) -> list[Sample]:
    spec.validate()
    if n < 1:
        raise ValueError("n must be >= 1")
    size = spec.size
    out = []
    for i in range(n):
        rng = make_rng(seed, i)
        y = int(rng.random() < spec.positive_fraction)
        field = ndimage.gaussian_filter(rng.standard_normal((size, size)), spec.texture_smoothness, mode="wrap")
        field /= field.std() + 1e-12
        img = spec.background + spec.texture_amplitude * field
        mask = np.zeros((size, size), dtype=bool)
        if y == 1:
            lo, hi = spec.axis_range
            for _ in range(spec.max_tries):
                ay, ax = rng.uniform(lo, hi, size=2)
                cy, cx = rng.uniform(0, size - 1, size=2)
                theta = rng.uniform(0, np.pi)
                r = max(ay, ax)
                if cy - r < 0 or cx - r < 0 or cy + r > size - 1 or cx + r > size - 1:
                    continue
                mask = _ellipse(size, cy, cx, ay, ax, theta)
                if mask.any():
                    break
            else:
                raise RuntimeError("could not place an ellipse inside the image")
            img = img + spec.lesion_intensity * mask
        out.append(Sample(image=img[None].astype(np.float32), label=y, mask=mask))
    return out


# ------------------------------------------------------------------ manifest


@dataclass
class ManifestRecord:
    id: str
    image: str
    label: int
    mask: str | None = None
    split: str = "train"


@dataclass
class DatasetManifest:
    root: Path
    records: list[ManifestRecord] = field(default_factory=list)

    def select(self, split: str | None = None, label: int | None = None) -> list[ManifestRecord]:
        return [
            r
            for r in self.records
            if (split is None or r.split == split) and (label is None or r.label == label)
        ]

    def load_image(self, rec: ManifestRecord) -> np.ndarray:
        return read_cdt(self.root / rec.image)

    def load_mask(self, rec: ManifestRecord) -> np.ndarray:
        if rec.mask is None:
            raise ValueError(f"record {rec.id} has no mask")
        return read_cdt(self.root / rec.mask) > 0.5

    def load_arrays(self, split: str | None = None, label: int | None = None):
        recs = self.select(split, label)
        x = np.stack([self.load_image(r) for r in recs]).astype(np.float32)
        y = np.array([r.label for r in recs], dtype=np.int64)
        return x, y, recs


def write_dataset(samples: list[Sample], out_dir, test_fraction: float = 0.2) -> DatasetManifest:
    """Write images, masks, PGM previews and ``manifest.jsonl``.

    The last ``test_fraction`` of samples forms the test split.
    """
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    n_test = int(round(len(samples) * test_fraction))
    records = []
    for i, s in enumerate(samples):
        sid = f"{i:06d}"
        write_cdt(root / "images" / f"{sid}.cdt", s.image)
        write_pgm(root / "images" / f"{sid}.pgm", s.image)
        mask_rel = None
        if s.label == 1:
            mask_rel = f"masks/{sid}.cdt"
            write_cdt(root / mask_rel, s.mask.astype(np.float32))
            write_pgm(root / "masks" / f"{sid}.pgm", s.mask.astype(np.float32), 0.0, 1.0)
        split = "test" if i >= len(samples) - n_test else "train"
        records.append(ManifestRecord(sid, f"images/{sid}.cdt", int(s.label), mask_rel, split))
    manifest = DatasetManifest(root, records)
    write_manifest(manifest)
    return manifest


def write_manifest(manifest: DatasetManifest, name: str = "manifest.jsonl") -> Path:
    path = Path(manifest.root) / name
    with open(path, "w") as fh:
        for r in manifest.records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")
    return path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                records.append(ManifestRecord(**json.loads(line)))
    for r in records:
        if r.label not in (0, 1):
            raise FormatError(f"record {r.id}: non-binary label {r.label}")
        if (r.mask is not None) != (r.label == 1):
            raise FormatError(f"record {r.id}: mask must be present iff label == 1")
    return DatasetManifest(path.parent, records)
