"""Dense embedding matrices: on-disk formats, normalization and base distances."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, ValidationError

EMBEDDING_MAGIC = b"MADPREMB"
FORMAT_VERSION = 1
DTYPE_F32 = 0
DTYPE_F64 = 1
# magic, version, N, D, dtype
_HEADER = struct.Struct("<8sIQII")

NORM_TOLERANCE = 1e-5
# rows per chunk when streaming exact distances (keeps temporaries near 8 MB)
_CHUNK_ELEMS = 1 << 20


class Metric(str, Enum):
    EUCLIDEAN = "euclidean"
    COSINE = "cosine"
    SPECTRAL = "spectral"


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """Row-major float32 matrix with one string id per row.

    Immutable after construction: the data buffer is copied and marked
    read-only, so one instance can be shared by any number of workers.
    """

    data: np.ndarray
    ids: tuple[str, ...]
    normalized: bool = False
    _index: dict = field(default=None, init=False, repr=False)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, order="C", copy=True)
        if data.ndim != 2:
            raise ValidationError(f"embedding data must be 2-D, got shape {data.shape}")
        ids = tuple(str(i) for i in self.ids)
        if len(ids) != data.shape[0]:
            raise ValidationError(f"{len(ids)} ids for {data.shape[0]} rows")
        index = {}
        for row, pid in enumerate(ids):
            if pid in index:
                raise ValidationError(f"duplicate id {pid!r} (rows {index[pid]} and {row})")
            index[pid] = row
        if not np.isfinite(data).all():
            bad = int(np.flatnonzero(~np.isfinite(data).all(axis=1))[0])
            raise ValidationError(f"non-finite value in row {bad} (id {ids[bad]!r})")
        if self.normalized and data.shape[0]:
            norms = np.linalg.norm(data.astype(np.float64), axis=1)
            if np.abs(norms - 1.0).max() > NORM_TOLERANCE:
                raise ValidationError("matrix flagged normalized but has rows off the unit sphere")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "_index", index)

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    @property
    def n_dims(self) -> int:
        return self.data.shape[1]

    @cached_property
    def data64(self) -> np.ndarray:
        """float64 copy used for distance accumulation."""
        out = self.data.astype(np.float64)
        out.setflags(write=False)
        return out

    @cached_property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.data64, axis=1)

    def index_of(self, pid: str) -> int:
        return self._index[pid]

    def __len__(self):
        return self.n_rows

    def __eq__(self, other):
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return (
            self.ids == other.ids
            and self.normalized == other.normalized
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


def ids_path(path) -> Path:
    return Path(path).with_suffix(".ids")


def _detect_format(path: Path, fmt: str | None) -> str:
    if fmt:
        if fmt not in ("binary", "csv"):
            raise ValidationError(f"unknown embedding format {fmt!r}")
        return fmt
    return "csv" if path.suffix.lower() == ".csv" else "binary"


def write_embeddings(m: EmbeddingMatrix, path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = _detect_format(path, fmt)
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id"] + [f"dim{j}" for j in range(m.n_dims)])
            for pid, row in zip(m.ids, m.data):
                writer.writerow([pid] + [repr(float(x)) for x in row])
        return
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(EMBEDDING_MAGIC, FORMAT_VERSION, m.n_rows, m.n_dims, DTYPE_F32))
        fh.write(m.data.astype("<f4", copy=False).tobytes())
    ids_path(path).write_text("".join(pid + "\n" for pid in m.ids), encoding="utf-8")


def read_matrix_container(buf: bytes, magic: bytes) -> tuple[np.ndarray, int]:
    """Parse a MADPR matrix container; returns the matrix and the offset after it."""
    if len(buf) < _HEADER.size or buf[:8] != magic:
        raise FormatError("bad magic")
    _, version, n, d, dtype = _HEADER.unpack_from(buf, 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    if dtype == DTYPE_F32:
        np_dtype = np.dtype("<f4")
    elif dtype == DTYPE_F64:
        np_dtype = np.dtype("<f8")
    else:
        raise FormatError(f"unknown dtype code {dtype}")
    nbytes = n * d * np_dtype.itemsize
    end = _HEADER.size + nbytes
    if len(buf) < end:
        raise FormatError(f"truncated data: header declares {n}x{d} but file holds fewer values")
    data = np.frombuffer(buf, dtype=np_dtype, count=n * d, offset=_HEADER.size).reshape(n, d)
    return data, end


def pack_matrix_container(data: np.ndarray, magic: bytes, dtype_code: int) -> bytes:
    np_dtype = "<f4" if dtype_code == DTYPE_F32 else "<f8"
    n, d = data.shape
    return _HEADER.pack(magic, FORMAT_VERSION, n, d, dtype_code) + np.ascontiguousarray(
        data, dtype=np_dtype
    ).tobytes()


def load_embeddings(path, fmt: str | None = None, normalized: bool = False) -> EmbeddingMatrix:
    path = Path(path)
    fmt = _detect_format(path, fmt)
    if fmt == "csv":
        return _load_csv(path, normalized)
    buf = path.read_bytes()
    data, end = read_matrix_container(buf, EMBEDDING_MAGIC)
    if data.dtype != np.dtype("<f4"):
        raise FormatError("embedding files must hold float32 values")
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after data")
    side = ids_path(path)
    if not side.exists():
        raise FormatError(f"missing id file {side}")
    ids = side.read_text(encoding="utf-8").splitlines()
    if len(ids) != data.shape[0]:
        raise FormatError(f"id file has {len(ids)} lines but matrix has {data.shape[0]} rows")
    return EmbeddingMatrix(data, ids, normalized=normalized)


def _load_csv(path: Path, normalized: bool) -> EmbeddingMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError("empty CSV file") from None
        d = len(header) - 1
        if d < 1 or header[0] != "id" or header[1:] != [f"dim{j}" for j in range(d)]:
            raise FormatError("malformed header: expected id,dim0,...,dim{D-1}")
        ids, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != d + 1:
                raise FormatError(f"line {lineno}: expected {d + 1} fields, got {len(rec)}")
            ids.append(rec[0])
            try:
                rows.append([float(x) for x in rec[1:]])
            except ValueError as exc:
                raise FormatError(f"line {lineno}: {exc}") from None
    data = np.array(rows, dtype=np.float32).reshape(len(rows), d)
    return EmbeddingMatrix(data, ids, normalized=normalized)


def normalize_l2(m: EmbeddingMatrix) -> EmbeddingMatrix:
    norms = m.norms
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValidationError(f"cannot normalize zero-norm row {int(zero[0])} (id {m.ids[zero[0]]!r})")
    return EmbeddingMatrix(m.data64 / norms[:, None], m.ids, normalized=True)


def _as_vectors(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValidationError(f"dimension mismatch: {a.size} vs {b.size}")
    return a, b


def euclidean_distance(a, b) -> float:
    a, b = _as_vectors(a, b)
    diff = a - b
    return float(np.sqrt(diff @ diff))


def cosine_distance(a, b) -> float:
    a, b = _as_vectors(a, b)
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    if na == 0.0 or nb == 0.0:
        raise ValidationError("cosine distance undefined for a zero-norm vector")
    return float(min(2.0, max(0.0, 1.0 - (a @ b) / (na * nb))))


def euclidean_to_all(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Exact ||points[i] - q|| for every row, accumulated in float64."""
    q = np.asarray(q, dtype=np.float64).ravel()
    if points.shape[1] != q.size:
        raise ValidationError(f"dimension mismatch: {points.shape[1]} vs {q.size}")
    n = points.shape[0]
    out = np.empty(n, dtype=np.float64)
    step = max(1, _CHUNK_ELEMS // max(1, q.size))
    for s in range(0, n, step):
        diff = points[s : s + step] - q
        np.sqrt(np.einsum("ij,ij->i", diff, diff), out=out[s : s + step])
    return out


def cosine_to_all(points: np.ndarray, q: np.ndarray, norms: np.ndarray | None = None) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).ravel()
    if points.shape[1] != q.size:
        raise ValidationError(f"dimension mismatch: {points.shape[1]} vs {q.size}")
    if norms is None:
        norms = np.linalg.norm(points, axis=1)
    qn = np.sqrt(q @ q)
    if qn == 0.0 or (norms == 0.0).any():
        raise ValidationError("cosine distance undefined for a zero-norm vector")
    out = 1.0 - (points @ q) / (norms * qn)
    return np.clip(out, 0.0, 2.0, out=out)


def distances_to_all(points: np.ndarray, q, metric: Metric, norms: np.ndarray | None = None) -> np.ndarray:
    """Distances from q to every row; spectral rows are compared with plain l2."""
    metric = Metric(metric)
    if metric is Metric.COSINE:
        return cosine_to_all(points, q, norms)
    return euclidean_to_all(points, q)


def from_rows(rows: Sequence[Sequence[float]], ids: Sequence[str] | None = None, normalized=False) -> EmbeddingMatrix:
    """Convenience constructor, mostly for small fixtures."""
    data = np.asarray(rows, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    if ids is None:
        ids = [f"p{i}" for i in range(data.shape[0])]
    return EmbeddingMatrix(data, ids, normalized=normalized)
