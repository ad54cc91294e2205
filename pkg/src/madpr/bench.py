"""Synthetic corpora and the latency / manifold-recovery benchmarks."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .embeddings import EmbeddingMatrix, Metric
from .errors import DisconnectedGraphError, MadprError, ValidationError
from .knn_graph import Cost, ManifoldGraph, build_knn_graph, connected_components, graph_from_knn_table, knn_table
from .ranking import attach_query, flat_rank, manifold_rank
from .rng import CounterRNG

log = logging.getLogger(__name__)

T_RANGE = 1.5 * math.pi


def synth_gaussian(n: int, d: int, seed: int, prefix: str = "p") -> EmbeddingMatrix:
    """i.i.d. standard normal rows (CounterRNG, row-major), l2-normalized."""
    if n < 1 or d < 1:
        raise ValidationError(f"n and d must be >= 1, got n={n}, d={d}")
    x = CounterRNG(seed).normal((n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return EmbeddingMatrix(x, [f"{prefix}{i}" for i in range(n)], normalized=True)


def s_curve_points(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return np.column_stack([np.sin(t), t, np.sign(t) * (np.cos(t) - 1.0)])


def random_orthonormal(rng: CounterRNG, rows: int, cols: int) -> np.ndarray:
    """rows x cols matrix with orthonormal columns (modified Gram-Schmidt on normals)."""
    a = rng.normal((rows, cols))
    for j in range(cols):
        for i in range(j):
            a[:, j] -= (a[:, i] @ a[:, j]) * a[:, i]
        a[:, j] /= np.linalg.norm(a[:, j])
    return a


def synth_s_curve(
    n: int, ambient_d: int, noise_sigma: float, seed: int, shape: str = "s"
) -> tuple[EmbeddingMatrix, np.ndarray]:
    """Noisy samples of a 1-D S-shaped curve embedded in ``ambient_d`` dims.

    Draw order from one CounterRNG stream: n uniforms for t on
    [-3pi/2, 3pi/2], then the ambient_d x 3 normals of the orthonormal map,
    then n x ambient_d noise normals (only when noise_sigma > 0).
    ``shape="line"`` replaces the curve by the straight segment (0, t, 0).
    Returns the matrix and the generating t per row.
    """
    if ambient_d < 3:
        raise ValidationError(f"ambient_d must be >= 3, got {ambient_d}")
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    if noise_sigma < 0:
        raise ValidationError(f"noise_sigma must be >= 0, got {noise_sigma}")
    rng = CounterRNG(seed)
    t = rng.uniform(n, -T_RANGE, T_RANGE)
    if shape == "s":
        pts = s_curve_points(t)
    elif shape == "line":
        pts = np.column_stack([np.zeros(n), t, np.zeros(n)])
    else:
        raise ValidationError(f"unknown curve shape {shape!r}")
    x = pts @ random_orthonormal(rng, ambient_d, 3).T
    if noise_sigma > 0:
        x += noise_sigma * rng.normal((n, ambient_d))
    return EmbeddingMatrix(x, [f"p{i}" for i in range(n)]), t


def rank_spearman(order: np.ndarray, truth: np.ndarray) -> float:
    """Spearman correlation between rank positions and a ground-truth distance."""
    pos = np.empty(order.size, dtype=np.float64)
    pos[order] = np.arange(order.size)
    return float(spearmanr(pos, truth).statistic)


def _recovery_scores(g: ManifoldGraph, base: EmbeddingMatrix, t_base, queries: EmbeddingMatrix, t_query):
    man, euc = [], []
    for q, tq in zip(queries.data64, t_query):
        truth = np.abs(t_base - tq)
        att = attach_query(g, base, q)
        man.append(rank_spearman(manifold_rank(g, att).indices, truth))
        euc.append(rank_spearman(flat_rank(base, q).indices, truth))
    return float(np.mean(man)), float(np.mean(euc))


def _recovery_data(n, ambient_d, noise_sigma, seed, n_queries, shape):
    pts, t = synth_s_curve(n + n_queries, ambient_d, noise_sigma, seed, shape)
    base = EmbeddingMatrix(pts.data[:n], pts.ids[:n])
    queries = EmbeddingMatrix(pts.data[n:], [f"q{i}" for i in range(n_queries)])
    return base, t[:n], queries, t[n:]


def run_manifold_recovery(
    n: int = 2000,
    ambient_d: int = 64,
    noise_sigma: float = 0.05,
    k: int = 8,
    seed: int = 0,
    n_queries: int = 100,
    shape: str = "s",
) -> tuple[float, float]:
    """Mean per-query Spearman of (manifold, Euclidean) rankings against |t - t_q|.

    The corpus and the held-out queries are one sample from the same
    generator: the first n rows are passages, the last n_queries rows are
    queries.  Rankings are full (every passage), on a DC + Euclidean graph.
    """
    base, t_base, queries, t_query = _recovery_data(n, ambient_d, noise_sigma, seed, n_queries, shape)
    g = build_knn_graph(base, k, Metric.EUCLIDEAN, Cost.DC)
    n_comp, _ = connected_components(g)
    if n_comp > 1:
        raise DisconnectedGraphError(n_comp, k)
    return _recovery_scores(g, base, t_base, queries, t_query)


def k_sweep(
    ks: Sequence[int],
    n: int = 2000,
    ambient_d: int = 64,
    noise_sigma: float = 0.05,
    seed: int = 0,
    n_queries: int = 100,
    shape: str = "s",
) -> list[dict]:
    """Manifold-recovery quality for each k, sharing one KNN table."""
    base, t_base, queries, t_query = _recovery_data(n, ambient_d, noise_sigma, seed, n_queries, shape)
    ks = sorted({min(int(k), n - 1) for k in ks})
    idx, dist = knn_table(base, ks[-1], Metric.EUCLIDEAN)
    rows = []
    for k in ks:
        g = graph_from_knn_table(idx[:, :k], dist[:, :k], k, Metric.EUCLIDEAN, Cost.DC)
        n_comp, _ = connected_components(g)
        if n_comp > 1:
            rows.append({"k": k, "components": n_comp, "spearman_manifold": math.nan, "spearman_euclidean": math.nan})
            continue
        man, euc = _recovery_scores(g, base, t_base, queries, t_query)
        rows.append({"k": k, "components": 1, "spearman_manifold": man, "spearman_euclidean": euc})
    return rows


@dataclass
class BenchConfig:
    n_passages: int = 100_000
    dims: tuple[int, ...] = (32, 64, 128, 256, 512, 1024)
    ks: tuple[int, ...] = tuple(range(2, 16))
    n_queries: int = 200
    warmup: int = 10
    seed: int = 7
    top_k: int | None = None
    threads: int | None = None

    def validate(self):
        if self.n_passages < 2 or self.n_queries < 2 or self.warmup < 0:
            raise ValidationError("n_passages and n_queries must be >= 2, warmup >= 0")
        if not self.dims or not self.ks or min(self.dims) < 1 or min(self.ks) < 1:
            raise ValidationError("dims and ks must be non-empty positive grids")
        if self.top_k is not None and self.top_k < 1:
            raise ValidationError("top_k must be >= 1")


@dataclass(frozen=True)
class LatencyStats:
    mean_ms: float
    p50_ms: float
    p95_ms: float
    p99_ms: float
    ci_ms: float  # 95% half-width, 1.96 * stderr

    @classmethod
    def from_samples(cls, ns: np.ndarray) -> "LatencyStats":
        ms = np.asarray(ns, dtype=np.float64) / 1e6
        half = 1.96 * ms.std(ddof=1) / math.sqrt(ms.size) if ms.size > 1 else 0.0
        p50, p95, p99 = np.percentile(ms, [50, 95, 99])
        return cls(float(ms.mean()), float(p50), float(p95), float(p99), float(half))


@dataclass
class LatencyRow:
    n_passages: int
    dims: int
    k: int
    nnz: int
    build_s: float
    flat: LatencyStats
    manifold: LatencyStats

    @property
    def ratio(self) -> float:
        return self.manifold.mean_ms / self.flat.mean_ms

    def flat_dict(self) -> dict:
        out = {"n_passages": self.n_passages, "dims": self.dims, "k": self.k, "nnz": self.nnz, "build_s": self.build_s}
        for name, st in (("flat", self.flat), ("manifold", self.manifold)):
            out.update({f"{name}_{key}": v for key, v in asdict(st).items()})
        out["ratio"] = self.ratio
        return out


@dataclass
class LatencyReport:
    config: BenchConfig
    rows: list[LatencyRow] = field(default_factory=list)

    def row(self, dims: int, k: int) -> LatencyRow:
        for r in self.rows:
            if r.dims == dims and r.k == k:
                return r
        raise KeyError((dims, k))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = None
            for r in self.rows:
                d = r.flat_dict()
                if w is None:
                    w = csv.DictWriter(fh, fieldnames=list(d), lineterminator="\n")
                    w.writeheader()
                w.writerow({key: (f"{v:.6g}" if isinstance(v, float) else v) for key, v in d.items()})


def _time_queries(g, base, queries, warmup, top_k):
    flat_ns, man_ns = [], []
    clock = time.perf_counter_ns
    for i, q in enumerate(queries.data64):
        t0 = clock()
        flat_rank(base, q, Metric.EUCLIDEAN, top_k)
        t1 = clock()
        manifold_rank(g, attach_query(g, base, q), top_k)
        t2 = clock()
        if i >= warmup:
            flat_ns.append(t1 - t0)
            man_ns.append(t2 - t1)
    return np.array(flat_ns), np.array(man_ns)


def run_latency_bench(cfg: BenchConfig) -> LatencyReport:
    """Per-query latency of flat and manifold ranking over a (D, K) grid.

    Per D the corpus and queries come from :func:`synth_gaussian` (queries
    with seed + 1).  One exact KNN table at the largest K is built and
    timed; each K's graph is its truncation, so ``build_s`` is the table
    time plus that K's assembly time.  Every query is timed for both
    methods back to back, warmup queries discarded.
    """
    cfg.validate()
    report = LatencyReport(cfg)
    max_k = min(max(cfg.ks), cfg.n_passages - 1)
    for d in cfg.dims:
        try:
            base = synth_gaussian(cfg.n_passages, d, cfg.seed)
            queries = synth_gaussian(cfg.warmup + cfg.n_queries, d, cfg.seed + 1, prefix="q")
            t0 = time.perf_counter()
            idx, dist = knn_table(base, max_k, Metric.EUCLIDEAN, cfg.threads)
            table_s = time.perf_counter() - t0
        except MemoryError:
            raise MadprError(f"allocation failed at N={cfg.n_passages}, D={d}") from None
        log.info("D=%d: knn table (k=%d) in %.1fs", d, max_k, table_s)
        for k in cfg.ks:
            k = min(k, max_k)
            try:
                t0 = time.perf_counter()
                g = graph_from_knn_table(idx[:, :k], dist[:, :k], k, Metric.EUCLIDEAN, Cost.DC)
                build_s = table_s + time.perf_counter() - t0
                flat_ns, man_ns = _time_queries(g, base, queries, cfg.warmup, cfg.top_k)
            except MemoryError:
                raise MadprError(f"allocation failed at N={cfg.n_passages}, D={d}, K={k}") from None
            row = LatencyRow(
                cfg.n_passages, d, k, g.nnz, build_s, LatencyStats.from_samples(flat_ns), LatencyStats.from_samples(man_ns)
            )
            log.info("D=%d K=%d: flat %.2fms manifold %.2fms", d, k, row.flat.mean_ms, row.manifold.mean_ms)
            report.rows.append(row)
        del idx, dist, base
    return report
