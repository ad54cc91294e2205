"""Spectral embedding from the normalized graph Laplacian of a KNN graph."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .eigen import lanczos_largest
from .embeddings import (
    DTYPE_F64,
    EmbeddingMatrix,
    euclidean_to_all,
    pack_matrix_container,
    read_matrix_container,
)
from .errors import ConvergenceError, DisconnectedGraphError, FormatError, ValidationError
from .knn_graph import Cost, ManifoldGraph, connected_components, smallest_k

log = logging.getLogger(__name__)

SPECTRAL_MAGIC = b"MADPRSPC"
TRIVIAL_EIGENVALUE = 1e-8
TRIVIAL_COSINE = 0.999
EXTENSION_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class SpectralEmbedding:
    """Row i holds the spectral coordinates of passage i.

    ``eigenvalues`` are the matching Laplacian eigenvalues, ascending, with
    the trivial one removed.
    """

    coords: np.ndarray
    eigenvalues: np.ndarray
    base_fingerprint: str

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        vals = np.ascontiguousarray(self.eigenvalues, dtype=np.float64)
        if coords.ndim != 2 or vals.shape != (coords.shape[1],):
            raise ValidationError("coords must be N x M with M eigenvalues")
        coords.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "eigenvalues", vals)

    @property
    def n_rows(self) -> int:
        return self.coords.shape[0]

    @property
    def n_dims(self) -> int:
        return self.coords.shape[1]

    def __eq__(self, other):
        if not isinstance(other, SpectralEmbedding):
            return NotImplemented
        return (
            self.base_fingerprint == other.base_fingerprint
            and self.coords.shape == other.coords.shape
            and self.coords.tobytes() == other.coords.tobytes()
            and self.eigenvalues.tobytes() == other.eigenvalues.tobytes()
        )

    __hash__ = None


def affinity_matrix(g: ManifoldGraph, weighting: str = "unit", sigma: float | None = None) -> sp.csr_matrix:
    """Edge affinities W: 1 per edge, or exp(-cost^2 / sigma^2) for ``gaussian``.

    ``sigma`` defaults to the median edge cost.
    """
    if weighting == "unit":
        w = np.ones(g.nnz)
    elif weighting == "gaussian":
        if g.cost is Cost.UC:
            raise ValidationError("gaussian weighting needs distance costs; graph uses uniform costs")
        c = g.costs.astype(np.float64)
        if sigma is None:
            sigma = float(np.median(c)) if c.size else 1.0
        if sigma <= 0:
            raise ValidationError(f"gaussian bandwidth must be positive, got {sigma}")
        w = np.exp(-(c**2) / sigma**2)
    else:
        raise ValidationError(f"unknown weighting {weighting!r}")
    return sp.csr_matrix((w, g.neighbors, g.offsets), shape=(g.n_vertices, g.n_vertices))


def _degrees(W: sp.csr_matrix) -> np.ndarray:
    deg = np.asarray(W.sum(axis=1)).ravel()
    isolated = np.flatnonzero(deg <= 0)
    if isolated.size:
        raise ValidationError(f"vertex {int(isolated[0])} is isolated (zero degree)")
    return deg


def normalized_adjacency(g: ManifoldGraph, weighting="unit", sigma=None) -> tuple[sp.csr_matrix, np.ndarray]:
    W = affinity_matrix(g, weighting, sigma)
    deg = _degrees(W)
    s = sp.diags(1.0 / np.sqrt(deg))
    return (s @ W @ s).tocsr(), deg


def build_normalized_laplacian(g: ManifoldGraph, weighting: str = "unit", sigma: float | None = None) -> sp.csr_matrix:
    """L_sym = I - D^-1/2 W D^-1/2 as a sparse matrix."""
    A, _ = normalized_adjacency(g, weighting, sigma)
    return (sp.identity(g.n_vertices, format="csr") - A).tocsr()


def spectral_embed(
    g: ManifoldGraph,
    m: int = 700,
    weighting: str = "unit",
    sigma: float | None = None,
    tol: float = 1e-6,
    max_iter: int | None = None,
    seed: int = 0,
) -> SpectralEmbedding:
    """Coordinates from the m smallest non-trivial eigenvectors of L_sym.

    Works on ``D^-1/2 W D^-1/2``, whose largest eigenvalues are ``1 - lambda``
    for the smallest Laplacian eigenvalues ``lambda``.
    """
    n = g.n_vertices
    if m < 1:
        raise ValidationError(f"spectral dimension must be >= 1, got {m}")
    if m > n - 1:
        warnings.warn(f"spectral dimension {m} exceeds N-1={n - 1}; clamping", stacklevel=2)
        m = n - 1
    n_comp, _ = connected_components(g)
    if n_comp > 1:
        raise DisconnectedGraphError(n_comp, g.k)
    A, deg = normalized_adjacency(g, weighting, sigma)
    theta, vecs = lanczos_largest(lambda v: A @ v, n, m + 1, tol=tol, max_iter=max_iter, seed=seed)
    lam = 1.0 - theta

    root = np.sqrt(deg)
    root /= np.linalg.norm(root)
    trivial = np.flatnonzero((lam < TRIVIAL_EIGENVALUE) & (np.abs(root @ vecs) > TRIVIAL_COSINE))
    keep = np.setdiff1d(np.arange(lam.size), trivial[:1])[:m]
    if trivial.size == 0:
        log.warning("no trivial eigenpair identified; keeping the %d smallest", m)
    lam, vecs = lam[keep], vecs[:, keep]

    # deterministic sign: largest-magnitude entry of each column is positive
    pivot = np.abs(vecs).argmax(axis=0)
    vecs = vecs * np.sign(vecs[pivot, np.arange(vecs.shape[1])])

    residuals = np.linalg.norm(vecs - A @ vecs - vecs * lam, axis=0)
    if residuals.size and residuals.max() > tol:
        raise ConvergenceError("spectral eigenpairs exceed residual tolerance", float(residuals.max()))
    return SpectralEmbedding(vecs, lam, g.fingerprint())


def spectral_distance(s: SpectralEmbedding, i: int, j: int) -> float:
    n = s.n_rows
    if not (0 <= i < n and 0 <= j < n):
        raise ValidationError(f"vertex index out of range for N={n}: ({i}, {j})")
    diff = s.coords[i] - s.coords[j]
    return float(np.sqrt(diff @ diff))


def extend_query(s: SpectralEmbedding, base: EmbeddingMatrix, q, k: int, distances: np.ndarray | None = None) -> np.ndarray:
    """Spectral coordinates for an out-of-sample vector.

    Inverse-distance weighted mean of the spectral rows of q's k Euclidean
    nearest passages (weights 1 / (1e-9 + dist), normalized to sum to one).
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if base.n_rows != s.n_rows:
        raise ValidationError("spectral embedding and base matrix differ in row count")
    d = euclidean_to_all(base.data64, q) if distances is None else distances
    nb = smallest_k(d, min(k, d.size))
    w = 1.0 / (EXTENSION_EPS + d[nb])
    w /= w.sum()
    return w @ s.coords[nb]


def save_spectral(s: SpectralEmbedding, path) -> None:
    fp = bytes.fromhex(s.base_fingerprint)
    if len(fp) != 32:
        raise ValidationError("base fingerprint must be a sha256 digest")
    Path(path).write_bytes(
        pack_matrix_container(s.coords, SPECTRAL_MAGIC, DTYPE_F64) + s.eigenvalues.astype("<f8").tobytes() + fp
    )


def load_spectral(path) -> SpectralEmbedding:
    buf = Path(path).read_bytes()
    coords, pos = read_matrix_container(buf, SPECTRAL_MAGIC)
    m = coords.shape[1]
    if len(buf) != pos + 8 * m + 32:
        raise FormatError("truncated or oversized spectral file")
    vals = np.frombuffer(buf, "<f8", m, pos)
    fp = buf[pos + 8 * m :].hex()
    return SpectralEmbedding(coords.astype(np.float64), vals.copy(), fp)
