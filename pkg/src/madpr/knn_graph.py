"""Symmetrized K-nearest-neighbor graph over passages, stored as CSR."""

from __future__ import annotations

import hashlib
import logging
import os
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingMatrix, Metric, distances_to_all
from ._kernels import select_candidates
from .errors import FormatError, ValidationError

log = logging.getLogger(__name__)

GRAPH_MAGIC = b"MADPRGPH"
GRAPH_VERSION = 1
# magic, version, N, nnz, metric tag, cost tag, k
_HEADER = struct.Struct("<8sIQQBBI")

_METRIC_TAGS = {Metric.EUCLIDEAN: 0, Metric.COSINE: 1, Metric.SPECTRAL: 2}
_BLOCK_BYTES = 64 << 20


class Cost(str, Enum):
    DC = "dc"
    UC = "uc"


_COST_TAGS = {Cost.DC: 0, Cost.UC: 1}


@dataclass(frozen=True, eq=False)
class ManifoldGraph:
    n_vertices: int
    offsets: np.ndarray
    neighbors: np.ndarray
    costs: np.ndarray
    k: int
    metric: Metric
    cost: Cost

    def __post_init__(self):
        object.__setattr__(self, "offsets", np.ascontiguousarray(self.offsets, dtype=np.int64))
        object.__setattr__(self, "neighbors", np.ascontiguousarray(self.neighbors, dtype=np.int32))
        object.__setattr__(self, "costs", np.ascontiguousarray(self.costs, dtype=np.float32))
        object.__setattr__(self, "metric", Metric(self.metric))
        object.__setattr__(self, "cost", Cost(self.cost))
        for arr in (self.offsets, self.neighbors, self.costs):
            arr.setflags(write=False)

    @property
    def nnz(self) -> int:
        return int(self.neighbors.size)

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)

    def neighbors_of(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        s, e = self.offsets[i], self.offsets[i + 1]
        return self.neighbors[s:e], self.costs[s:e]

    def edge_set(self) -> set[tuple[int, int]]:
        rows = np.repeat(np.arange(self.n_vertices), self.degrees)
        return set(zip(rows.tolist(), self.neighbors.tolist()))

    def to_scipy(self):
        import scipy.sparse as sp

        return sp.csr_matrix(
            (self.costs.astype(np.float64), self.neighbors, self.offsets),
            shape=(self.n_vertices, self.n_vertices),
        )

    def validate(self, check_symmetry: bool = True) -> None:
        n = self.n_vertices
        if self.offsets.size != n + 1 or self.offsets[0] != 0 or self.offsets[-1] != self.nnz:
            raise FormatError("corrupt CSR: offsets do not span the neighbor array")
        if self.costs.size != self.nnz:
            raise FormatError("corrupt CSR: cost and neighbor arrays differ in length")
        if (np.diff(self.offsets) < 0).any():
            raise FormatError("corrupt CSR: offsets decrease")
        if self.nnz and (self.neighbors.min() < 0 or self.neighbors.max() >= n):
            raise FormatError("corrupt CSR: neighbor index out of range")
        if not np.isfinite(self.costs).all() or (self.costs < 0).any():
            raise FormatError("corrupt CSR: costs must be finite and non-negative")
        rows = np.repeat(np.arange(n, dtype=np.int64), self.degrees)
        if (rows == self.neighbors).any():
            raise FormatError("corrupt CSR: self-loop")
        if check_symmetry:
            fwd = rows * n + self.neighbors
            rev = self.neighbors.astype(np.int64) * n + rows
            of, orv = np.argsort(fwd, kind="stable"), np.argsort(rev, kind="stable")
            if not (np.array_equal(fwd[of], rev[orv]) and np.array_equal(self.costs[of], self.costs[orv])):
                raise FormatError("corrupt CSR: graph is not symmetric")

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(
            GRAPH_MAGIC, GRAPH_VERSION, self.n_vertices, self.nnz,
            _METRIC_TAGS[self.metric], _COST_TAGS[self.cost], self.k,
        )
        return b"".join(
            (
                head,
                self.offsets.astype("<u8").tobytes(),
                self.neighbors.astype("<u4").tobytes(),
                self.costs.astype("<f4").tobytes(),
            )
        )

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def __eq__(self, other):
        if not isinstance(other, ManifoldGraph):
            return NotImplemented
        return (
            self.n_vertices == other.n_vertices
            and self.k == other.k
            and self.metric == other.metric
            and self.cost == other.cost
            and np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.neighbors, other.neighbors)
            and self.costs.tobytes() == other.costs.tobytes()
        )

    __hash__ = None


def save_graph(g: ManifoldGraph, path) -> None:
    Path(path).write_bytes(g.to_bytes())


def graph_from_bytes(buf: bytes) -> ManifoldGraph:
    if len(buf) < _HEADER.size or buf[:8] != GRAPH_MAGIC:
        raise FormatError("bad magic")
    _, version, n, nnz, mtag, ctag, k = _HEADER.unpack_from(buf, 0)
    if version != GRAPH_VERSION:
        raise FormatError(f"unsupported graph version {version}")
    try:
        metric = {v: m for m, v in _METRIC_TAGS.items()}[mtag]
        cost = {v: c for c, v in _COST_TAGS.items()}[ctag]
    except KeyError:
        raise FormatError(f"unknown metric/cost tag {mtag}/{ctag}") from None
    expected = _HEADER.size + 8 * (n + 1) + 4 * nnz + 4 * nnz
    if len(buf) < expected:
        raise FormatError("truncated graph file")
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes in graph file")
    pos = _HEADER.size
    offsets = np.frombuffer(buf, "<u8", n + 1, pos).astype(np.int64)
    pos += 8 * (n + 1)
    neighbors = np.frombuffer(buf, "<u4", nnz, pos).astype(np.int32)
    pos += 4 * nnz
    costs = np.frombuffer(buf, "<f4", nnz, pos).copy()
    if offsets[-1] != nnz:
        raise FormatError("corrupt CSR: offsets[N] != number of neighbors")
    g = ManifoldGraph(n, offsets, neighbors, costs, k, metric, cost)
    g.validate()
    return g


def load_graph(path) -> ManifoldGraph:
    return graph_from_bytes(Path(path).read_bytes())


def _metric_points(points, metric: Metric) -> tuple[np.ndarray, np.ndarray | None]:
    """Resolve the coordinate array a metric operates on, plus row norms for cosine."""
    metric = Metric(metric)
    if metric is Metric.SPECTRAL:
        coords = getattr(points, "coords", None)
        if coords is None:
            if isinstance(points, EmbeddingMatrix):
                raise ValidationError("spectral metric requires a SpectralEmbedding")
            coords = np.asarray(points, dtype=np.float64)
        return coords, None
    if isinstance(points, EmbeddingMatrix):
        return points.data64, points.norms if metric is Metric.COSINE else None
    arr = np.asarray(getattr(points, "coords", points), dtype=np.float64)
    return arr, np.linalg.norm(arr, axis=1) if metric is Metric.COSINE else None


def smallest_k(d: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest entries, ordered by (value, index)."""
    n = d.size
    if k >= n:
        return np.argsort(d, kind="stable")
    kth = np.partition(d, k - 1)[k - 1]
    cand = np.flatnonzero(d <= kth)
    order = np.lexsort((cand, d[cand]))
    return cand[order[:k]]


def knn_query(points, probe, k: int, metric=Metric.EUCLIDEAN, exclude: int | None = None) -> list[tuple[int, float]]:
    """Exact brute-force k nearest rows to ``probe``, ascending, ties by index."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    coords, norms = _metric_points(points, metric)
    d = distances_to_all(coords, probe, metric, norms)
    if exclude is not None:
        d = d.copy()
        d[exclude] = np.inf
        k = min(k, coords.shape[0] - 1)
    idx = smallest_k(d, k)
    return [(int(i), float(d[i])) for i in idx]


def _exact_pair_distances(coords, norms, rows: np.ndarray, cand: np.ndarray, metric: Metric) -> np.ndarray:
    a = coords[rows][:, None, :]
    b = coords[cand]
    if metric is Metric.COSINE:
        dots = np.einsum("bcd,bcd->bc", np.broadcast_to(a, b.shape), b)
        out = 1.0 - dots / (norms[rows][:, None] * norms[cand])
        return np.clip(out, 0.0, 2.0)
    diff = b - a
    return np.sqrt(np.einsum("bcd,bcd->bc", diff, diff))


def _knn_block(coords, coords32, norms, sq, rows: np.ndarray, k: int, metric: Metric, err_scale: float):
    n = coords.shape[0]
    c = min(n - 1, k + max(k, 16))
    if c == n - 1:
        # small corpus: score every other row exactly
        cand = np.array([np.delete(np.arange(n), i) for i in rows], dtype=np.int64).reshape(rows.size, c)
        excluded = None
    else:
        gram = coords32[rows] @ coords32.T
        cand = np.empty((rows.size, c), dtype=np.int64)
        excluded = np.empty(rows.size, dtype=np.float64)
        select_candidates(gram, rows, sq, norms if norms is not None else sq, metric is Metric.COSINE, c, cand, excluded)

    exact = _exact_pair_distances(coords, norms, rows, cand, metric)
    order = np.lexsort((cand, exact), axis=1)[:, :k]
    idx = np.take_along_axis(cand, order, axis=1)
    dist = np.take_along_axis(exact, order, axis=1)

    if excluded is not None:
        if metric is Metric.COSINE:
            kth, err = dist[:, -1], err_scale
        else:
            kth, err = dist[:, -1] ** 2, err_scale * (sq[rows] + sq.max())
        for r in np.flatnonzero(kth >= excluded - err):
            # the screening cut may have dropped a near-tie: redo this row exhaustively
            i = rows[r]
            others = np.delete(np.arange(n), i)
            full = _exact_pair_distances(coords, norms, rows[r : r + 1], others[None, :], metric)[0]
            o = np.lexsort((others, full))[:k]
            idx[r], dist[r] = others[o], full[o]
    return idx, dist


def knn_table(points, k: int, metric=Metric.EUCLIDEAN, threads: int | None = None):
    """Exact k nearest neighbors of every row (self excluded).

    Returns ``(indices, distances)``, both ``N x k``, rows sorted by
    ``(distance, index)``.  Candidates are screened with a blocked float32
    matrix product and then re-scored exactly in float64; rows whose
    candidate window could hide a near-tie (per a worst-case rounding bound)
    are recomputed exhaustively, so the result is exact.
    """
    metric = Metric(metric)
    coords, norms = _metric_points(points, metric)
    n, dim = coords.shape
    if n < 2:
        raise ValidationError(f"need at least 2 points to build a graph, got {n}")
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if k > n - 1:
        warnings.warn(f"k={k} exceeds N-1={n - 1}; clamping", stacklevel=2)
        k = n - 1
    if metric is Metric.COSINE and (norms == 0).any():
        raise ValidationError("cosine metric undefined for zero-norm rows")
    coords32 = coords.astype(np.float32)
    sq = np.einsum("ij,ij->i", coords, coords)
    # |fl32(x.y) - x.y| <= (gamma_D + 2u) |x||y| for float32 unit roundoff u
    u = float(np.finfo(np.float32).eps) / 2
    gamma = dim * u / (1 - dim * u)
    err_scale = 2.0 * (gamma + 2 * u) * 1.01

    bs = max(1, min(n, _BLOCK_BYTES // (4 * n)))
    blocks = [np.arange(s, min(n, s + bs)) for s in range(0, n, bs)]
    threads = threads or os.cpu_count() or 1

    def work(rows):
        return _knn_block(coords, coords32, norms, sq, rows, k, metric, err_scale)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, blocks))
    else:
        results = [work(b) for b in blocks]
    idx = np.vstack([r[0] for r in results]).astype(np.int64)
    dist = np.vstack([r[1] for r in results])
    return idx, dist


def graph_from_knn_table(idx: np.ndarray, dist: np.ndarray, k: int, metric, cost) -> ManifoldGraph:
    """Symmetric closure of the first ``k`` columns of a KNN table."""
    cost = Cost(cost)
    n = idx.shape[0]
    k = min(k, idx.shape[1])
    rows = np.repeat(np.arange(n, dtype=np.int64), k)
    cols = idx[:, :k].ravel().astype(np.int64)
    w = dist[:, :k].ravel()
    r = np.concatenate([rows, cols])
    c = np.concatenate([cols, rows])
    w = np.concatenate([w, w])
    key = r * n + c
    order = np.argsort(key, kind="stable")
    key, w = key[order], w[order]
    first = np.ones(key.size, dtype=bool)
    first[1:] = key[1:] != key[:-1]
    starts = np.flatnonzero(first)
    w = np.minimum.reduceat(w, starts) if key.size else w
    key = key[starts]
    r, c = key // n, key % n
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(r, minlength=n), out=offsets[1:])
    costs = np.ones(c.size, dtype=np.float32) if cost is Cost.UC else w.astype(np.float32)
    return ManifoldGraph(n, offsets, c.astype(np.int32), costs, k, metric, cost)


def build_knn_graph(points, k: int = 8, metric=Metric.EUCLIDEAN, cost=Cost.DC, threads: int | None = None) -> ManifoldGraph:
    """Build G = (V, E, c): an edge joins i and j if either is among the other's k nearest."""
    idx, dist = knn_table(points, k, metric, threads)
    g = graph_from_knn_table(idx, dist, idx.shape[1], metric, cost)
    log.info("built %s/%s graph: N=%d k=%d nnz=%d", g.metric.value, g.cost.value, g.n_vertices, g.k, g.nnz)
    return g


@dataclass(frozen=True)
class DegreeStats:
    degrees: np.ndarray
    mean: float
    min: int
    max: int
    percentiles: dict

    def threshold(self, percentile: float = 10.0) -> float:
        return float(np.percentile(self.degrees, percentile))

    def low_degree(self, percentile: float = 10.0) -> np.ndarray:
        """Vertices whose degree is at or below the given percentile.

        Every vertex of a KNN graph has degree >= k and the low percentiles
        usually sit exactly at k, so a strict cut would never fire.
        """
        return np.flatnonzero(self.degrees <= self.threshold(percentile))


def degree_stats(g: ManifoldGraph, percentiles=(10, 25, 50, 75, 90)) -> DegreeStats:
    deg = g.degrees
    if deg.size == 0:
        return DegreeStats(deg, 0.0, 0, 0, {p: 0.0 for p in percentiles})
    return DegreeStats(
        degrees=deg,
        mean=float(deg.mean()),
        min=int(deg.min()),
        max=int(deg.max()),
        percentiles={p: float(np.percentile(deg, p)) for p in percentiles},
    )


def connected_components(g: ManifoldGraph) -> tuple[int, np.ndarray]:
    from scipy.sparse.csgraph import connected_components as cc

    return cc(g.to_scipy(), directed=False)
