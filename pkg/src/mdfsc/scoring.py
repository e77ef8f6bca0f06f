"""Image-level anomaly scores.

The sparse-coding scorer featurizes every grid patch of a test image, codes
each feature column against the dictionary, and sums the ``k`` largest
per-patch residuals.  The reconstruction baseline scores an image by the mean
squared error of a fully convolutional autoencoder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndnum as nn
from .autoencoder import AutoencoderModel, forward
from .errors import ContractError, MDFSCError
from .features import feature_dim, multiscale_features
from .pipeline import ImageRecord, sliding_patches
from .sparse import Dictionary, lasso_lars_batch, residuals


@dataclass(eq=False)
class AnomalyReport:
    id: str
    score: float
    k: int
    residuals: np.ndarray                 # one per grid patch, grid order
    coords: np.ndarray                    # (n_patches, 2) top-left corners
    model_digest: str = ""
    dict_digest: str = ""
    flagged: bool = False                 # k exceeded the patch count
    normalized: bool = False              # score divided by n_patches
    scorer: str = "mdfsc"

    @property
    def n_patches(self) -> int:
        return int(self.residuals.shape[0])

    def top(self, k: int | None = None) -> np.ndarray:
        return top_k_indices(self.residuals, self.coords, self.k if k is None else k)

    def to_json(self) -> dict:
        idx = self.top()
        return {
            "id": self.id,
            "score": self.score,
            "k": self.k,
            "n_patches": self.n_patches,
            "top_residuals": [{"row": int(self.coords[i, 0]), "col": int(self.coords[i, 1]),
                               "value": float(self.residuals[i])} for i in idx],
            "model_digest": self.model_digest,
            "dict_digest": self.dict_digest or None,
            "scorer": self.scorer,
            "flagged": self.flagged,
        }


@dataclass
class ScoreError:
    """Placeholder for an image that could not be scored inside a batch."""

    id: str
    message: str
    kind: str = field(default="error")

    def to_json(self) -> dict:
        return {"id": self.id, "error": self.message}


def top_k_indices(values: np.ndarray, coords: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest values; ties broken by (row, col) ascending."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    coords = np.asarray(coords)
    order = np.lexsort((coords[:, 1], coords[:, 0], -np.asarray(values)))
    return order[:k]


def top_k_score(values: np.ndarray, coords: np.ndarray, k: int) -> float:
    idx = top_k_indices(values, coords, k)
    return float(np.sum(np.asarray(values, dtype=np.float64)[idx]))


def _check_pixels(img: ImageRecord):
    if not np.all(np.isfinite(img.pixels)):
        raise ContractError(f"image {img.id} contains non-finite pixels")


def score_image(model: AutoencoderModel, D: Dictionary, img: ImageRecord, k: int = 5,
                alpha: float = 1.0, patch: int = 16, stride: int = 2,
                count_normalized: bool = False, threads: int = 1,
                model_digest: str | None = None) -> AnomalyReport:
    """Sum of the ``k`` largest patch residuals; ``img`` must already be normalized."""
    d = feature_dim(model.arch, patch)
    mdig = model_digest or model.digest
    if d != D.d:
        raise ContractError(f"feature dimension {d} of model {mdig} does not match "
                            f"dictionary {D.digest} (d={D.d})")
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if img.channels != model.arch.input_channels:
        raise ContractError(f"image {img.id} has {img.channels} channels, "
                            f"model expects {model.arch.input_channels}")
    _check_pixels(img)
    ps = sliding_patches(img, patch, stride)
    F = multiscale_features(model, ps.patches).T
    W, _ = lasso_lars_batch(D, F, alpha, threads=threads)
    res = residuals(D, F, W)
    flagged = k > res.size
    score = top_k_score(res, ps.coords, k)
    if count_normalized:
        score /= res.size
    return AnomalyReport(img.id, score, k, res, ps.coords, mdig, D.digest,
                         flagged, count_normalized)


def recon_baseline_score(fullconv_model: AutoencoderModel, img: ImageRecord) -> float:
    """Mean squared reconstruction error of the whole (normalized) image."""
    if fullconv_model.arch.with_linear_head:
        raise ContractError("the reconstruction baseline needs a model without the linear head")
    _check_pixels(img)
    x = img.pixels.astype(np.float32, copy=False)
    return nn.l2_loss(forward(fullconv_model, x), x)


def recon_report(model: AutoencoderModel, img: ImageRecord, model_digest: str | None = None) -> AnomalyReport:
    score = recon_baseline_score(model, img)
    return AnomalyReport(img.id, score, 1, np.array([score]), np.zeros((1, 2), dtype=np.intp),
                         model_digest or model.digest, "", scorer="recon")


def score_batch(model: AutoencoderModel, D: Dictionary | None, images, k: int = 5,
                scorer: str = "mdfsc", **kwargs) -> list:
    """Score each image in order.  Failures become :class:`ScoreError` entries."""
    if scorer not in ("mdfsc", "recon"):
        raise ContractError(f"unknown scorer {scorer!r}")
    mdig = model.digest
    out = []
    for img in images:
        try:
            if scorer == "recon":
                out.append(recon_report(model, img, mdig))
            else:
                out.append(score_image(model, D, img, k, model_digest=mdig, **kwargs))
        except (MDFSCError, ValueError, FloatingPointError) as exc:
            out.append(ScoreError(getattr(img, "id", "?"), str(exc)))
    return out


def write_reports(path, reports) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_reports(path) -> list[dict]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rows.append(json.loads(line))
    return rows
