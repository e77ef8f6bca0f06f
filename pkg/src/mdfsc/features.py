"""Multi-scale deep features from encoder taps.

For a patch of side p the three taps are read at three input scales so that
their spatial grids coincide at p/8:

* stage4_last on the patch itself,
* stage3_last on the patch downscaled by 2,
* stage2_last on the patch downscaled by 4.

The three activations are stacked along channels and flattened row-major
into one column of the feature matrix.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndnum as nn
from .autoencoder import AutoencoderModel, TapName, encode_tap
from .errors import ContractError, LoadError
from .pipeline import ImageRecord, sliding_patches

FEAT_MAGIC = b"MDFSCF1"
_SCALES = ((TapName.stage4_last, 1), (TapName.stage3_last, 2), (TapName.stage2_last, 4))


def feature_dim(arch, p: int = 16) -> int:
    w = arch.stage_widths
    return (w[1] + w[2] + w[3]) * (p // 8) ** 2


@dataclass
class FeatureVector:
    values: np.ndarray
    source: tuple = ("", 0, 0)  # (image id, patch row, patch col)


@dataclass(eq=False)
class FeatureMatrix:
    """d x m matrix whose columns are per-patch feature vectors."""

    values: np.ndarray
    image_ids: list = field(default_factory=list)  # one per column
    coords: np.ndarray | None = None                # (m, 2) patch corners

    @property
    def d(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]


def multiscale_features(model: AutoencoderModel, patches: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Features for a batch of patches (k, c, p, p); returns (k, d) float32."""
    if patches.ndim != 4:
        raise ContractError(f"patches must be (k, c, p, p), got {patches.shape}")
    k, _, p, q = patches.shape
    if p != q or p % 8:
        raise ContractError(f"patch side must be square and divisible by 8, got {p}x{q}")
    d = feature_dim(model.arch, p)
    out = np.empty((k, d), dtype=np.float32)
    for lo in range(0, k, chunk):
        x = np.ascontiguousarray(patches[lo:lo + chunk], dtype=np.float32)
        parts = []
        for tap, factor in _SCALES:
            xs = x if factor == 1 else nn.downscale(x, factor)
            parts.append(encode_tap(model, xs, tap))
        sides = {a.shape[2:] for a in parts}
        if len(sides) != 1:
            raise ContractError(f"tap outputs disagree on spatial size: {sorted(sides)}")
        out[lo:lo + chunk] = np.concatenate(parts, axis=1).reshape(x.shape[0], -1)
    return out


def multiscale_feature(model: AutoencoderModel, patch: np.ndarray, source=("", 0, 0)) -> FeatureVector:
    if patch.ndim == 3:
        patch = patch[None]
    if patch.shape[0] != 1:
        raise ContractError(f"expected a single patch (1, c, p, p), got {patch.shape}")
    return FeatureVector(multiscale_features(model, patch)[0], tuple(source))


def build_feature_matrix(model: AutoencoderModel, images: list[ImageRecord], budget_per_image: int = 500,
                         rng=None, patch: int = 16, stride: int = 2) -> FeatureMatrix:
    """Subsample up to ``budget_per_image`` grid patches per (normalized) image."""
    if not images:
        raise ContractError("no images to featurize")
    if budget_per_image < 1:
        raise ContractError(f"budget_per_image must be >= 1, got {budget_per_image}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    blocks, ids, coords = [], [], []
    for img in images:
        ps = sliding_patches(img, patch, stride)
        if len(ps) <= budget_per_image:
            pick = np.arange(len(ps))
        else:
            pick = np.sort(rng.choice(len(ps), size=budget_per_image, replace=False))
        blocks.append(multiscale_features(model, ps.take(pick)))
        ids += [img.id] * pick.size
        coords.append(ps.coords[pick])
    values = np.ascontiguousarray(np.concatenate(blocks).T)
    return FeatureMatrix(values, ids, np.concatenate(coords))


def save_matrix(F: FeatureMatrix | np.ndarray, path) -> None:
    """Raw export: magic, u32 d, u64 m, then d*m float32 values column by column."""
    values = F.values if isinstance(F, FeatureMatrix) else np.asarray(F)
    d, m = values.shape
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC + struct.pack("<IQ", d, m))
        fh.write(np.ascontiguousarray(values.T, dtype="<f4").tobytes())


def load_matrix(path) -> FeatureMatrix:
    data = Path(path).read_bytes()
    head = len(FEAT_MAGIC) + 12
    if len(data) < head or data[:len(FEAT_MAGIC)] != FEAT_MAGIC:
        raise LoadError(f"{path}: not a feature matrix file")
    d, m = struct.unpack_from("<IQ", data, len(FEAT_MAGIC))
    if len(data) != head + 4 * d * m:
        raise LoadError(f"{path}: expected {head + 4 * d * m} bytes, found {len(data)}")
    cols = np.frombuffer(data, dtype="<f4", offset=head).reshape(m, d)
    return FeatureMatrix(np.ascontiguousarray(cols.T, dtype=np.float32))
