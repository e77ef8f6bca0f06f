"""Image ingestion, normalization, patch extraction and synthetic data.

Images travel as :class:`ImageRecord` objects holding a (1, c, H, W)
float32 tensor.  Raw pixels live in [0, 1]; :func:`apply_norm` maps them to
per-channel standardized values using statistics fitted on the training
split.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import ContractError, FitError, IngestionError

LABELS = ("normal", "anomalous", "unknown")


@dataclass(eq=False)
class ImageRecord:
    id: str
    pixels: np.ndarray
    label: str = "unknown"

    def __post_init__(self):
        if self.label not in LABELS:
            raise ContractError(f"unknown label {self.label!r}")
        if self.pixels.ndim != 4 or self.pixels.shape[0] != 1:
            raise ContractError(f"pixels must be (1, c, H, W), got {self.pixels.shape}")

    @property
    def channels(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[2], self.pixels.shape[3]


# --------------------------------------------------------------------------
# ingestion


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling of a (..., H, W) array with half-pixel centers.

    No antialiasing: each output pixel samples the input at
    ``(i + 0.5) * H / out_h - 0.5``, clamped to the valid range.
    """
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis(h, out_h)
    x0, x1, wx = axis(w, out_w)
    wy = wy[:, None]
    top = x[..., y0, :][..., x0] * (1 - wx) + x[..., y0, :][..., x1] * wx
    bot = x[..., y1, :][..., x0] * (1 - wx) + x[..., y1, :][..., x1] * wx
    return top * (1 - wy) + bot * wy


def _decode(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode.startswith("I;16") or im.mode == "I":
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            elif im.mode in ("1", "L", "LA"):
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
            elif im.mode == "F":
                arr = np.clip(np.asarray(im, dtype=np.float64), 0.0, 1.0)
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise IngestionError(f"{path}: file not found") from None
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise IngestionError(f"{path}: cannot decode image ({exc})") from None
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    if arr.shape[1] == 0 or arr.shape[2] == 0:
        raise IngestionError(f"{path}: image has zero size")
    return arr


def load_and_resize(path, target: int, label: str = "unknown", image_id: str | None = None) -> ImageRecord:
    """Read a PNG/PGM/PPM file and resize it to ``target`` x ``target``."""
    path = Path(path)
    arr = _decode(path)
    arr = bilinear_resize(arr, target, target)
    return ImageRecord(image_id or path.stem, arr[None].astype(np.float32), label)


def write_image(path, pixels: np.ndarray) -> None:
    """Write a (1, c, H, W) or (c, H, W) [0, 1] tensor as an 8-bit image."""
    arr = np.asarray(pixels)
    if arr.ndim == 4:
        arr = arr[0]
    q = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    im = Image.fromarray(q[0]) if q.shape[0] == 1 else Image.fromarray(q.transpose(1, 2, 0))
    im.save(path)


# --------------------------------------------------------------------------
# normalization


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def fit_norm_stats(train: list[ImageRecord]) -> NormStats:
    if not train:
        raise ContractError("cannot fit normalization on an empty training set")
    c = train[0].channels
    count, s1 = 0, np.zeros(c)
    for rec in train:
        if rec.channels != c:
            raise ContractError("training images disagree on channel count")
        px = rec.pixels[0].reshape(c, -1).astype(np.float64)
        s1 += px.sum(axis=1)
        count += px.shape[1]
    mean = s1 / count
    s2 = np.zeros(c)
    for rec in train:
        px = rec.pixels[0].reshape(c, -1).astype(np.float64)
        s2 += ((px - mean[:, None]) ** 2).sum(axis=1)
    std = np.sqrt(s2 / count)
    if np.any(std <= 1e-12):
        raise FitError(f"channel(s) {np.flatnonzero(std <= 1e-12).tolist()} are constant; std is 0")
    return NormStats(mean, std)


def apply_norm(img: ImageRecord, stats: NormStats) -> ImageRecord:
    if img.channels != stats.mean.size:
        raise ContractError(f"image has {img.channels} channels, stats have {stats.mean.size}")
    px = (img.pixels.astype(np.float64) - stats.mean[None, :, None, None]) / stats.std[None, :, None, None]
    return ImageRecord(img.id, px.astype(np.float32), img.label)


def denormalize(img: ImageRecord, stats: NormStats) -> ImageRecord:
    px = img.pixels.astype(np.float64) * stats.std[None, :, None, None] + stats.mean[None, :, None, None]
    return ImageRecord(img.id, px.astype(np.float32), img.label)


# --------------------------------------------------------------------------
# patches


def random_crop(img: ImageRecord, p: int, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape
    if h < p or w < p:
        raise ContractError(f"image {h}x{w} smaller than crop {p}")
    top = int(rng.integers(0, h - p + 1))
    left = int(rng.integers(0, w - p + 1))
    return img.pixels[:, :, top:top + p, left:left + p].copy()


@dataclass(eq=False)
class PatchSet:
    """Every p x p window of an image at stride s, in row-major grid order.

    ``grid`` is a read-only strided view of shape (rows, cols, c, p, p) into
    the source image; ``coords`` holds the (row, col) top-left corners in the
    same order as :meth:`take` indices.
    """

    source_id: str
    size: int
    stride: int
    coords: np.ndarray
    grid: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return self.coords.shape[0]

    def take(self, indices) -> np.ndarray:
        """Copy out the patches at flat grid ``indices`` as an (k, c, p, p) array."""
        idx = np.asarray(indices, dtype=np.intp)
        cols = self.grid.shape[1]
        return np.ascontiguousarray(self.grid[idx // cols, idx % cols])

    @property
    def patches(self) -> np.ndarray:
        return self.take(np.arange(len(self)))

    def __iter__(self) -> Iterator[tuple[int, int, np.ndarray]]:
        cols = self.grid.shape[1]
        for i, (r, c) in enumerate(self.coords):
            yield int(r), int(c), self.grid[i // cols, i % cols][None]


def grid_count(h: int, w: int, p: int, s: int) -> int:
    return ((h - p) // s + 1) * ((w - p) // s + 1)


def sliding_patches(img: ImageRecord, p: int = 16, s: int = 2) -> PatchSet:
    h, w = img.shape
    if h < p or w < p:
        raise ContractError(f"image {h}x{w} smaller than patch {p}")
    if s < 1:
        raise ContractError(f"stride must be >= 1, got {s}")
    win = sliding_window_view(img.pixels[0], (p, p), axis=(1, 2))[:, ::s, ::s]  # (c, R, C, p, p)
    rows = np.arange(win.shape[1]) * s
    cols = np.arange(win.shape[2]) * s
    coords = np.stack(np.meshgrid(rows, cols, indexing="ij"), axis=-1).reshape(-1, 2)
    return PatchSet(img.id, p, s, coords, win.transpose(1, 2, 0, 3, 4))


# --------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    """Parameters of the synthetic fundus-like generator.

    Sizes given as fractions scale with ``size``.  Anomalies are placed fully
    inside the bright disc.
    """

    n_normal: int = 250
    n_anomalous: int = 50
    train_fraction: float = 0.8
    size: int = 128
    channels: int = 3
    anomaly_count: tuple[int, int] = (1, 3)
    anomaly_radius: tuple[float, float] = (0.03, 0.06)
    contrast: float = 0.25
    kinds: tuple[str, ...] = ("bright", "dark")
    texture_amplitude: float = 0.02
    n_vessels: tuple[int, int] = (4, 7)

    def __post_init__(self):
        self.anomaly_count = tuple(self.anomaly_count)
        self.anomaly_radius = tuple(self.anomaly_radius)
        self.kinds = tuple(self.kinds)
        self.n_vessels = tuple(self.n_vessels)
        if self.n_normal < 0 or self.n_anomalous < 0:
            raise ContractError("image counts must be non-negative")
        if not 0.0 <= self.train_fraction <= 1.0:
            raise ContractError("train_fraction must lie in [0, 1]")
        if self.size < 16 or self.channels not in (1, 3):
            raise ContractError("size must be >= 16 and channels 1 or 3")
        lo, hi = self.anomaly_count
        if lo < 0 or hi < lo:
            raise ContractError(f"bad anomaly_count range {self.anomaly_count}")
        rlo, rhi = self.anomaly_radius
        if not 0 < rlo <= rhi < 0.2:
            raise ContractError(f"bad anomaly_radius range {self.anomaly_radius}")
        unknown = set(self.kinds) - set(ANOMALY_KINDS)
        if unknown or not self.kinds:
            raise ContractError(f"unknown anomaly kinds {sorted(unknown)}")
        if not 0 < self.contrast <= 0.35:
            raise ContractError("contrast must lie in (0, 0.35]")

    @property
    def n_train(self) -> int:
        return int(self.n_normal * self.train_fraction)


ANOMALY_KINDS = ("bright", "dark", "occlusion", "blur")
_TINT = np.array([1.0, 0.92, 0.84])
_BACKGROUND = 0.04


def image_rng(seed: int, image_id: str) -> np.random.Generator:
    """Independent PRNG stream for one image, derived from (seed, id)."""
    key = int.from_bytes(hashlib.sha256(image_id.encode()).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), key]))


@dataclass
class _Layout:
    cy: float
    cx: float
    radius: float


def _normal_image(cfg: SynthConfig, rng) -> tuple[np.ndarray, _Layout]:
    S = cfg.size
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    cy, cx = S / 2 + rng.normal(0, 0.02 * S, size=2)
    R = S * rng.uniform(0.40, 0.46)
    r = np.hypot(yy - cy, xx - cx)
    lc, le = rng.uniform(0.58, 0.62), rng.uniform(0.40, 0.44)
    level = lc - (lc - le) * np.clip(r / R, 0, 1) ** 2
    inside = np.clip((R - r) / 1.5 + 0.5, 0.0, 1.0)  # ~1.5 px soft rim

    noise = rng.standard_normal((S, S))
    band = ndimage.gaussian_filter(noise, S / 64) - ndimage.gaussian_filter(noise, S / 16)
    band *= cfg.texture_amplitude / (np.abs(band).max() + 1e-12)
    level = level + band

    vessels = np.zeros((S, S))
    oy, ox = cy + rng.uniform(-0.1, 0.1) * R, cx + rng.choice([-1, 1]) * 0.35 * R
    width = max(0.6, S / 160)
    for _ in range(int(rng.integers(cfg.n_vessels[0], cfg.n_vessels[1] + 1))):
        theta = rng.uniform(0, 2 * np.pi)
        py, px = oy, ox
        step = S / 64
        for _ in range(int(1.2 * R / step)):
            theta += rng.normal(0, 0.12)
            ny, nx = py + step * np.sin(theta), px + step * np.cos(theta)
            # distance from every pixel to the segment (py,px)-(ny,nx), on a local window
            y0, y1 = int(max(0, min(py, ny) - 3)), int(min(S, max(py, ny) + 4))
            x0, x1 = int(max(0, min(px, nx) - 3)), int(min(S, max(px, nx) + 4))
            if y0 < y1 and x0 < x1:
                sy, sx = yy[y0:y1, x0:x1] - py, xx[y0:y1, x0:x1] - px
                dy, dx = ny - py, nx - px
                t = np.clip((sy * dy + sx * dx) / (dy * dy + dx * dx), 0, 1)
                dist = np.hypot(sy - t * dy, sx - t * dx)
                vessels[y0:y1, x0:x1] = np.maximum(
                    vessels[y0:y1, x0:x1], np.clip(1.0 - dist / width + 0.5, 0, 1))
            py, px = ny, nx
    level = level * (1.0 - 0.18 * vessels)

    gray = _BACKGROUND + (level - _BACKGROUND) * inside
    tint = _TINT[:cfg.channels] if cfg.channels == 3 else np.ones(1)
    img = np.clip(gray[None] * tint[:, None, None], 0.0, 1.0)
    return img, _Layout(cy, cx, R)


def _inject(img, layout: _Layout, cfg: SynthConfig, rng) -> list[dict]:
    """Add anomalies in place; returns their descriptors."""
    S = cfg.size
    yy, xx = np.mgrid[0:S, 0:S]
    out = []
    n = int(rng.integers(cfg.anomaly_count[0], cfg.anomaly_count[1] + 1))
    for _ in range(n):
        kind = cfg.kinds[int(rng.integers(len(cfg.kinds)))]
        rad = S * rng.uniform(*cfg.anomaly_radius)
        reach = max(layout.radius - rad - 3, 0.0)
        ang, dist = rng.uniform(0, 2 * np.pi), reach * np.sqrt(rng.uniform())
        by, bx = layout.cy + dist * np.sin(ang), layout.cx + dist * np.cos(ang)
        mask = np.hypot(yy - by, xx - bx) <= rad
        if kind == "occlusion":
            mask = (np.abs(yy - by) <= rad) & (np.abs(xx - bx) <= rad)
        ring = (np.hypot(yy - by, xx - bx) <= 2 * rad) & ~mask
        if kind in ("bright", "dark"):
            sgn = 1.0 if kind == "bright" else -1.0
            for ch in range(img.shape[0]):
                shift = img[ch][ring].mean() - img[ch][mask].mean() + sgn * cfg.contrast
                img[ch][mask] = np.clip(img[ch][mask] + shift, 0.0, 1.0)
        elif kind == "occlusion":
            img[:, mask] = _BACKGROUND
        else:
            blurred = ndimage.gaussian_filter(img, sigma=(0, rad / 2, rad / 2))
            img[:, mask] = blurred[:, mask]
        out.append({"kind": kind, "row": float(by), "col": float(bx), "radius": float(rad),
                    "mask": mask, "ring": ring})
    return out


def synth_image(cfg: SynthConfig, seed: int, image_id: str, anomalous: bool):
    """One synthetic image plus the list of injected anomalies."""
    rng = image_rng(seed, image_id)
    img, layout = _normal_image(cfg, rng)
    blobs = _inject(img, layout, cfg, rng) if anomalous else []
    label = "anomalous" if anomalous else "normal"
    return ImageRecord(image_id, img[None].astype(np.float32), label), blobs


def synth_dataset(cfg: SynthConfig, seed: int) -> tuple[list[ImageRecord], list[ImageRecord]]:
    """Return ``(train, test)``; train holds the first ``n_train`` normals."""
    normals = [synth_image(cfg, seed, f"normal_{i:05d}", False)[0] for i in range(cfg.n_normal)]
    anomalies = [synth_image(cfg, seed, f"anomalous_{i:05d}", True)[0]
                 for i in range(cfg.n_anomalous)]
    k = cfg.n_train
    return normals[:k], normals[k:] + anomalies


# --------------------------------------------------------------------------
# manifests


def read_manifest(path) -> list[tuple[str, str]]:
    """Parse ``<relative-path>\\t<label>`` lines; blank lines and ``#`` comments are skipped."""
    entries = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[1] not in ("normal", "anomalous"):
            raise IngestionError(f"{path}:{lineno}: expected '<path>\\t<normal|anomalous>'")
        entries.append((parts[0], parts[1]))
    return entries


def write_manifest(path, entries) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rel, label in entries:
            fh.write(f"{rel}\t{label}\n")


def split_entries(entries, train_fraction: float = 0.8):
    """First ``floor(train_fraction * n_normal)`` normal entries, in manifest order, train."""
    normals = [e for e in entries if e[1] == "normal"]
    k = int(len(normals) * train_fraction)
    train = normals[:k]
    chosen = set(id(e) for e in train)
    return train, [e for e in entries if id(e) not in chosen]


def entry_id(rel: str) -> str:
    return Path(rel).with_suffix("").as_posix()
