"""Linear PCA projection baseline."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .eigen import lanczos_largest
from .embeddings import EmbeddingMatrix
from .errors import FormatError, ValidationError

PCA_MAGIC = b"MADPRPCA"
PCA_VERSION = 1
_HEADER = struct.Struct("<8sIII")


@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # D x M, orthonormal columns
    explained_variance: np.ndarray

    def __post_init__(self):
        for name in ("mean", "components", "explained_variance"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        d, m = self.components.shape
        if self.mean.shape != (d,) or self.explained_variance.shape != (m,):
            raise ValidationError("inconsistent PCA model shapes")

    @property
    def dims(self) -> int:
        return self.components.shape[1]

    def __eq__(self, other):
        if not isinstance(other, PcaModel):
            return NotImplemented
        return to_bytes(self) == to_bytes(other)

    __hash__ = None


def fit_pca(m: EmbeddingMatrix, dims: int, tol: float = 1e-8, seed: int = 0) -> PcaModel:
    """Top ``dims`` principal axes of the mean-centered rows.

    The covariance (1/(N-1) normalization) is never formed; Lanczos only
    needs products ``X^T (X v)``.  Each component is signed so its
    largest-magnitude entry is positive.
    """
    n, d = m.n_rows, m.n_dims
    if n < 2:
        raise ValidationError("PCA needs at least two rows")
    if not 1 <= dims <= min(n, d):
        raise ValidationError(f"dims must be in [1, {min(n, d)}], got {dims}")
    x = m.data64
    mean = x.mean(axis=0)
    xc = x - mean
    scale = 1.0 / (n - 1)
    # tolerance relative to the largest variance keeps unscaled data well posed
    top = float(np.einsum("ij,ij->", xc, xc)) * scale
    vals, vecs = lanczos_largest(lambda v: scale * (xc.T @ (xc @ v)), d, dims, tol=tol * max(top, 1.0), seed=seed)
    pivot = np.abs(vecs).argmax(axis=0)
    vecs = vecs * np.sign(vecs[pivot, np.arange(dims)])
    return PcaModel(mean, vecs, np.clip(vals, 0.0, None))


def pca_project(model: PcaModel, m: EmbeddingMatrix) -> EmbeddingMatrix:
    if m.n_dims != model.mean.size:
        raise ValidationError(f"model expects {model.mean.size} dims, matrix has {m.n_dims}")
    return EmbeddingMatrix((m.data64 - model.mean) @ model.components, m.ids)


def to_bytes(model: PcaModel) -> bytes:
    d, dims = model.components.shape
    return (
        _HEADER.pack(PCA_MAGIC, PCA_VERSION, d, dims)
        + model.mean.astype("<f8").tobytes()
        + model.components.astype("<f8").tobytes()
        + model.explained_variance.astype("<f8").tobytes()
    )


def save_pca(model: PcaModel, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load_pca(path) -> PcaModel:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size or buf[:8] != PCA_MAGIC:
        raise FormatError("bad magic")
    _, version, d, dims = _HEADER.unpack_from(buf)
    if version != PCA_VERSION:
        raise FormatError(f"unsupported version {version}")
    if len(buf) != _HEADER.size + 8 * (d + d * dims + dims):
        raise FormatError("truncated or oversized PCA file")
    pos = _HEADER.size
    mean = np.frombuffer(buf, "<f8", d, pos)
    pos += 8 * d
    comps = np.frombuffer(buf, "<f8", d * dims, pos).reshape(d, dims)
    pos += 8 * d * dims
    var = np.frombuffer(buf, "<f8", dims, pos)
    return PcaModel(mean, comps, var)
