"""Lasso coding by LARS and dictionary learning with unit-norm atoms.

The objective is::

    sum_i  0.5 * ||f_i - D w_i||_2^2 + alpha * ||w_i||_1,   ||d_j||_2 = 1

with ``alpha`` used as-is (no per-sample rescaling).  Coding goes through
the Gram-form LARS kernel selected in :mod:`mdfsc._backend`.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _backend, _container
from .errors import ContractError, FitError, LoadError

log = logging.getLogger(__name__)

DICT_MAGIC = b"MDFSCD1"
DICT_FORMAT_VERSION = 1
_NORM_TOL_LOAD = 1e-4
_CHUNK = 4096


@dataclass(eq=False)
class Dictionary:
    """A d x n matrix of unit-norm atoms, stored in float32.

    ``meta`` carries fit provenance (alpha, seed, objective trace) and is
    written into the file manifest.
    """

    atoms: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.atoms = np.ascontiguousarray(self.atoms, dtype=np.float32)
        if self.atoms.ndim != 2:
            raise ContractError(f"dictionary must be a d x n matrix, got {self.atoms.shape}")
        if not np.all(np.isfinite(self.atoms)):
            raise ContractError("dictionary contains non-finite entries")

    @property
    def d(self) -> int:
        return self.atoms.shape[0]

    @property
    def n(self) -> int:
        return self.atoms.shape[1]

    def norm_deviation(self) -> float:
        norms = np.linalg.norm(self.atoms.astype(np.float64), axis=0)
        return float(np.max(np.abs(norms - 1.0))) if self.n else 0.0

    def to_bytes(self) -> bytes:
        manifest = {"format_version": DICT_FORMAT_VERSION, "d": self.d, "n": self.n,
                    "meta": self.meta}
        return _container.pack(DICT_MAGIC, manifest, [("atoms", self.atoms)])

    @property
    def digest(self) -> str:
        return _container.digest_hex(self.to_bytes())


@dataclass
class SparseCode:
    coefficients: np.ndarray
    flags: int = 0

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.coefficients)


@dataclass
class LassoProblem:
    D: Dictionary | np.ndarray
    f: np.ndarray
    alpha: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ContractError(f"alpha must be >= 0, got {self.alpha}")
        atoms = self.D.atoms if isinstance(self.D, Dictionary) else np.asarray(self.D)
        if atoms.ndim != 2 or atoms.shape[0] != np.shape(self.f)[0]:
            raise ContractError(
                f"dictionary rows {atoms.shape} do not match signal length {np.shape(self.f)}"
            )


@dataclass
class DictFitReport:
    objective_trace: list
    n_outer: int
    converged: bool
    reseeded_atoms: int
    degenerate_codes: int
    underdetermined: bool


def _atoms64(D) -> np.ndarray:
    atoms = D.atoms if isinstance(D, Dictionary) else D
    return np.asarray(atoms, dtype=np.float64)


def _code_rows(G, C0, alpha, max_nonzeros, tol, threads):
    if threads <= 1 or C0.shape[0] < 2 * _CHUNK:
        return _backend.lars_gram_batch(G, C0, alpha, max_nonzeros, tol)
    bounds = list(range(0, C0.shape[0], _CHUNK)) + [C0.shape[0]]
    parts = [C0[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(
            lambda part: _backend.lars_gram_batch(G, part, alpha, max_nonzeros, tol), parts))
    return np.vstack([r[0] for r in results]), np.concatenate([r[1] for r in results])


def lasso_lars(problem: LassoProblem, max_nonzeros: int | None = None,
               tol: float = 1e-7) -> SparseCode:
    """Solve one Lasso problem along the LARS homotopy path."""
    D = _atoms64(problem.D)
    f = np.asarray(problem.f, dtype=np.float64)
    if not (np.all(np.isfinite(D)) and np.all(np.isfinite(f)) and np.isfinite(problem.alpha)):
        raise ContractError("lasso_lars received non-finite inputs")
    n = D.shape[1]
    if max_nonzeros is not None and not 0 <= max_nonzeros <= n:
        raise ContractError(f"max_nonzeros must lie in [0, {n}], got {max_nonzeros}")
    W, flags = _backend.lars_gram_batch(D.T @ D, (f @ D)[None, :], float(problem.alpha),
                                        max_nonzeros, tol)
    return SparseCode(W[0], int(flags[0]))


def lasso_lars_batch(D, F, alpha=1.0, max_nonzeros=None, tol=1e-7, threads=1):
    """Code every column of ``F`` (d x m).  Returns ``(W, flags)`` with W of shape (n, m)."""
    Dm = _atoms64(D)
    F = np.asarray(F)
    if F.ndim != 2 or F.shape[0] != Dm.shape[0]:
        raise ContractError(f"feature matrix {F.shape} does not match dictionary {Dm.shape}")
    G = Dm.T @ Dm
    C0 = F.T.astype(np.float64) @ Dm
    if not np.all(np.isfinite(C0)):
        raise ContractError("lasso_lars_batch received non-finite inputs")
    W, flags = _code_rows(G, C0, float(alpha), max_nonzeros, tol, threads)
    return np.ascontiguousarray(W.T), flags


def residual(D, f, w) -> float:
    """Data-fit term ``0.5 * ||f - D w||^2`` (the L1 penalty is not included)."""
    Dm = _atoms64(D)
    coef = w.coefficients if isinstance(w, SparseCode) else w
    r = np.asarray(f, dtype=np.float64) - Dm @ np.asarray(coef, dtype=np.float64)
    return 0.5 * float(r @ r)


def residuals(D, F, W) -> np.ndarray:
    """Column-wise :func:`residual` for F (d x m) and W (n x m)."""
    Dm = _atoms64(D)
    out = np.empty(F.shape[1])
    for lo in range(0, F.shape[1], _CHUNK):
        R = F[:, lo:lo + _CHUNK].astype(np.float64) - Dm @ W[:, lo:lo + _CHUNK]
        out[lo:lo + _CHUNK] = 0.5 * np.einsum("ij,ij->j", R, R)
    return out


def objective(D, F, W, alpha) -> float:
    return float(residuals(D, F, W).sum() + alpha * np.abs(W).sum())


# --------------------------------------------------------------------------
# dictionary learning


def _init_atoms(F64, n, rng):
    """Seed atoms from data columns, k-means++ style on angular residual energy.

    Each new atom is a column drawn with probability proportional to its
    squared norm minus its largest squared projection on the atoms so far.
    Once every column is explained, the remaining atoms are random unit vectors.
    """
    d, m = F64.shape
    norms2 = np.einsum("ij,ij->j", F64, F64)
    D = np.empty((d, n))
    best_proj2 = np.zeros(m)
    k = 0
    while k < n:
        energy = np.maximum(norms2 - best_proj2, 0.0)
        total = energy.sum()
        if not total > 1e-12 * max(norms2.sum(), 1e-300):
            break
        col = rng.choice(m, p=energy / total)
        D[:, k] = F64[:, col] / np.sqrt(norms2[col])
        best_proj2 = np.maximum(best_proj2, (D[:, k] @ F64) ** 2)
        k += 1
    if k < n:
        extra = rng.standard_normal((d, n - k))
        D[:, k:] = extra / np.linalg.norm(extra, axis=0)
    return D


def _update_atoms(D, A, B):
    """One sweep of atom-wise block coordinate descent on the sphere.

    With W fixed, the objective restricted to atom j is linear in d_j on the
    unit sphere, so ``v / ||v||`` with ``v = b_j - sum_{k!=j} d_k A_kj`` is
    its exact minimizer.
    """
    for j in range(D.shape[1]):
        if A[j, j] <= 0:
            continue
        v = B[:, j] - D @ A[:, j] + D[:, j] * A[j, j]
        nv = np.linalg.norm(v)
        if nv > 0:
            D[:, j] = v / nv


def dict_learn(F, n=50, alpha=1.0, max_outer=30, tol=1e-4, rng=None,
               max_nonzeros=None, lars_tol=1e-7, threads=1):
    """Learn a unit-norm dictionary for the columns of ``F`` (d x m).

    Alternates Lasso coding of every column with a block-coordinate sweep
    over the atoms.  Atoms that no column uses are re-seeded from the worst
    reconstructed columns; this cannot raise the objective because their
    coefficients are all zero.  Stops when the relative decrease of the
    objective falls below ``tol``.

    Returns ``(Dictionary, DictFitReport)``.
    """
    F = np.asarray(getattr(F, "values", F))
    if F.ndim != 2 or F.shape[1] < 1:
        raise ContractError(f"feature matrix must be d x m with m >= 1, got {F.shape}")
    if n < 1:
        raise ContractError(f"need at least one atom, got n={n}")
    F64 = F.astype(np.float64)
    if not np.all(np.isfinite(F64)):
        raise ContractError("feature matrix contains non-finite entries")
    if not np.any(F64):
        raise FitError("feature matrix is all zeros; nothing to learn")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    m = F64.shape[1]
    underdetermined = n > m and alpha == 0
    if underdetermined:
        log.warning("n=%d atoms > m=%d columns with alpha=0: underdetermined fit", n, m)

    D = _init_atoms(F64, n, rng)
    trace, reseeded, degenerate, converged = [], 0, 0, False
    for it in range(max_outer):
        W, flags = lasso_lars_batch(D, F64, alpha, max_nonzeros, lars_tol, threads)
        degenerate += int(np.count_nonzero(flags & _backend.FLAG_DEGENERATE))
        res = residuals(D, F64, W)
        trace.append(float(res.sum() + alpha * np.abs(W).sum()))
        log.debug("dict_learn outer %d objective %.10g", it, trace[-1])
        if it > 0:
            prev = trace[-2]
            if prev <= 0 or (prev - trace[-1]) <= tol * prev:
                converged = True
                break
        if it == max_outer - 1:
            break
        _update_atoms(D, W @ W.T, F64 @ W.T)
        dead = np.flatnonzero(~np.any(W, axis=1))
        if dead.size:
            worst = np.argsort(-res, kind="stable")
            worst = worst[np.linalg.norm(F64[:, worst], axis=0) > 0][:dead.size]
            for j, col in zip(dead, worst):
                D[:, j] = F64[:, col] / np.linalg.norm(F64[:, col])
            reseeded += min(dead.size, worst.size)

    D /= np.linalg.norm(D, axis=0)
    meta = {"alpha": float(alpha), "objective_trace": trace, "n_outer": len(trace)}
    report = DictFitReport(trace, len(trace), converged, reseeded, degenerate,
                           underdetermined)
    return Dictionary(D, meta), report


# --------------------------------------------------------------------------
# persistence


def save_dict(D: Dictionary, path) -> str:
    """Write ``D`` to ``path``; returns its hex digest."""
    data = D.to_bytes()
    Path(path).write_bytes(data)
    return _container.digest_hex(data)


def load_dict(path) -> Dictionary:
    data = Path(path).read_bytes()
    manifest, tensors = _container.unpack(DICT_MAGIC, data, source=str(path))
    if manifest.get("format_version") != DICT_FORMAT_VERSION:
        raise LoadError(f"{path}: unsupported dictionary version {manifest.get('format_version')}")
    if "atoms" not in tensors:
        raise LoadError(f"{path}: no atoms tensor")
    D = Dictionary(tensors["atoms"], manifest.get("meta", {}))
    if (D.d, D.n) != (manifest.get("d"), manifest.get("n")):
        raise LoadError(f"{path}: manifest dims disagree with payload")
    if D.norm_deviation() > _NORM_TOL_LOAD:
        raise LoadError(f"{path}: atom norms deviate from 1 by {D.norm_deviation():.3g}")
    return D
