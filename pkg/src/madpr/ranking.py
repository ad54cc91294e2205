"""Manifold-aware passage ranking over a shared, immutable KNN graph.

The query is never inserted into the graph.  It becomes a virtual source
whose only edges are its k nearest passages (the attachment); Dijkstra
starts from those edges, so concurrent queries need no locking.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._kernels import dijkstra_rank
from .embeddings import EmbeddingMatrix, Metric, cosine_to_all, euclidean_to_all
from .errors import FormatError, ValidationError
from .knn_graph import ManifoldGraph, smallest_k
from .spectral import SpectralEmbedding, extend_query

UNREACHABLE_SCORE = -1e30


class _IndexIds(Sequence):
    """Stand-in passage ids "0".."n-1", built on access."""

    def __init__(self, n: int):
        self._n = n

    def __len__(self):
        return self._n

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [str(j) for j in range(self._n)[i]]
        if not -self._n <= i < self._n:
            raise IndexError(i)
        return str(i % self._n)


@dataclass(frozen=True)
class QueryAttachment:
    neighbors: np.ndarray
    edge_costs: np.ndarray
    base_distances: np.ndarray
    # raw euclidean distance from the query to every passage (tie-break key)
    tie_distances: np.ndarray


@dataclass(frozen=True)
class RankedList:
    query_id: str
    indices: np.ndarray
    distances: np.ndarray
    hops: np.ndarray
    passage_ids: Sequence[str]
    method: str = ""

    def __len__(self):
        return self.indices.size

    def doc_ids(self) -> list[str]:
        return [self.passage_ids[i] for i in self.indices]

    @property
    def entries(self) -> list[tuple[str, float, int | None]]:
        return [
            (self.passage_ids[i], float(d), None if h < 0 else int(h))
            for i, d, h in zip(self.indices.tolist(), self.distances.tolist(), self.hops.tolist())
        ]


def attach_query(
    g: ManifoldGraph,
    base: EmbeddingMatrix,
    q,
    k: int | None = None,
    edge_cost_mode: str = "distance",
    spectral: SpectralEmbedding | None = None,
) -> QueryAttachment:
    """Connect a query to its k nearest passages under the graph's metric.

    Edge costs are the metric distances (``distance``) or 1.0 (``uniform``).
    """
    k = g.k if k is None else k
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if edge_cost_mode not in ("distance", "uniform"):
        raise ValidationError(f"unknown query edge cost mode {edge_cost_mode!r}")
    if base.n_rows != g.n_vertices:
        raise ValidationError(f"graph has {g.n_vertices} vertices but corpus has {base.n_rows} rows")
    k = min(k, base.n_rows)
    euclid = euclidean_to_all(base.data64, q)
    if g.metric is Metric.EUCLIDEAN:
        d = euclid
    elif g.metric is Metric.COSINE:
        d = cosine_to_all(base.data64, q, base.norms)
    else:
        if spectral is None:
            raise ValidationError("graph uses the spectral metric but no spectral embedding was given")
        qs = extend_query(spectral, base, q, k, distances=euclid)
        d = euclidean_to_all(spectral.coords, qs)
    nb = smallest_k(d, k)
    costs = d[nb] if edge_cost_mode == "distance" else np.ones(nb.size)
    return QueryAttachment(nb.astype(np.int64), costs.astype(np.float64), euclid[nb], euclid)


def manifold_rank(
    g: ManifoldGraph,
    att: QueryAttachment,
    top_k: int | None = None,
    query_id: str = "",
    passage_ids: Sequence[str] | None = None,
) -> RankedList:
    """Rank passages by shortest-path cost from the virtual query node.

    Equal costs are ordered by raw Euclidean distance to the query, then by
    passage index.  Passages the query cannot reach get distance inf and
    follow every reachable one, in the same tie-break order.  With ``top_k``
    the traversal stops as soon as the prefix is settled.
    """
    n = g.n_vertices
    if att.tie_distances.size != n:
        raise ValidationError("attachment was built against a different corpus")
    top = n if top_k is None else max(0, min(int(top_k), n))
    if passage_ids is None:
        passage_ids = _IndexIds(n)
    tag = f"manifold-{g.metric.value}-{g.cost.value}"
    if top == 0:
        empty = np.zeros(0, dtype=np.int64)
        return RankedList(query_id, empty, np.zeros(0), empty, passage_ids, tag)
    order, dist, hops = dijkstra_rank(
        g.offsets, g.neighbors, g.costs, att.neighbors, att.edge_costs, att.tie_distances, top
    )
    if order.size < top:
        rest = np.flatnonzero(np.isinf(dist))
        rest = rest[np.lexsort((rest, att.tie_distances[rest]))]
        order = np.concatenate([order, rest[: top - order.size]])
    else:
        order = order[:top]
    return RankedList(query_id, order, dist[order], hops[order], passage_ids, tag)


def flat_rank(
    base: EmbeddingMatrix,
    q,
    metric=Metric.EUCLIDEAN,
    top_k: int | None = None,
    query_id: str = "",
) -> RankedList:
    """Plain DPR: sort passages by Euclidean or cosine distance to the query."""
    metric = Metric(metric)
    if metric is Metric.EUCLIDEAN:
        d = euclidean_to_all(base.data64, q)
    elif metric is Metric.COSINE:
        d = cosine_to_all(base.data64, q, base.norms)
    else:
        raise ValidationError("flat ranking supports euclidean and cosine only")
    top = base.n_rows if top_k is None else max(0, min(int(top_k), base.n_rows))
    order = smallest_k(d, top) if top else np.zeros(0, dtype=np.int64)
    return RankedList(query_id, order, d[order], np.full(order.size, -1), base.ids, f"flat-{metric.value}")


def rank_queries(
    g: ManifoldGraph | None,
    base: EmbeddingMatrix,
    queries: EmbeddingMatrix,
    k: int | None = None,
    top_k: int | None = 20,
    edge_cost_mode: str = "distance",
    spectral: SpectralEmbedding | None = None,
    flat_metric=None,
) -> list[RankedList]:
    """Rank every query row; ``g=None`` (or ``flat_metric``) gives the flat baseline."""
    out = []
    for qid, q in zip(queries.ids, queries.data64):
        if g is None or flat_metric is not None:
            out.append(flat_rank(base, q, flat_metric or Metric.EUCLIDEAN, top_k, qid))
        else:
            att = attach_query(g, base, q, k, edge_cost_mode, spectral)
            out.append(manifold_rank(g, att, top_k, qid, base.ids))
    return out


def trec_lines(r: RankedList, tag: str | None = None) -> Iterable[str]:
    tag = tag or r.method or "madpr"
    for rank, (pid, d) in enumerate(zip(r.doc_ids(), r.distances.tolist()), start=1):
        score = UNREACHABLE_SCORE if np.isinf(d) else -d
        yield f"{r.query_id} Q0 {pid} {rank} {score!r} {tag}"


def write_run(path, rankings: Iterable[RankedList], tag: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rankings:
            for line in trec_lines(r, tag):
                fh.write(line + "\n")


def read_run(path) -> dict[str, list[str]]:
    """Parse a TREC run file into query id -> doc ids ordered by rank."""
    runs: dict[str, list[tuple[int, str]]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise FormatError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        qid, _, docid, rank, _score, _tag = parts
        try:
            runs.setdefault(qid, []).append((int(rank), docid))
        except ValueError:
            raise FormatError(f"{path}:{lineno}: bad rank {rank!r}") from None
    return {qid: [d for _, d in sorted(rows)] for qid, rows in runs.items()}
