"""Relevance judgments, rank metrics, significance testing and distance diagnostics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import betainc

from .embeddings import EmbeddingMatrix
from .errors import FormatError, ValidationError
from .knn_graph import ManifoldGraph
from .ranking import attach_query, manifold_rank
from .rng import CounterRNG

Qrels = dict[str, dict[str, int]]

DIAGNOSTICS_HEADER = ["qid", "pid", "relevant", "d_euclidean", "d_manifold", "hops"]


def load_qrels(path) -> Qrels:
    """Parse TREC qrels lines ``qid iter docid rel``; the iter column is ignored."""
    qrels: Qrels = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise FormatError(f"{path}:{lineno}: malformed qrels line {line!r}")
        qid, _, docid, rel = parts
        try:
            grade = int(rel)
        except ValueError:
            raise FormatError(f"{path}:{lineno}: relevance {rel!r} is not an integer") from None
        if grade < 0:
            raise FormatError(f"{path}:{lineno}: negative relevance grade {grade}")
        qrels.setdefault(qid, {})[docid] = grade
    return qrels


def write_qrels(qrels: Mapping[str, Mapping[str, int]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid, judged in qrels.items():
            for docid, grade in judged.items():
                fh.write(f"{qid} 0 {docid} {grade}\n")


def _relevant(judged: Mapping[str, int]) -> set[str]:
    return {d for d, g in judged.items() if g >= 1}


def _check_k(k: int) -> None:
    if k < 1:
        raise ValidationError(f"cutoff must be >= 1, got {k}")


def recall_at_k(ranking: Sequence[str], judged: Mapping[str, int], k: int) -> float:
    _check_k(k)
    rel = _relevant(judged)
    if not rel:
        return 0.0
    return len(rel.intersection(ranking[:k])) / len(rel)


def map_at_k(ranking: Sequence[str], judged: Mapping[str, int], k: int) -> float:
    """Average precision over the top k, normalized by min(R, k)."""
    _check_k(k)
    rel = _relevant(judged)
    if not rel:
        return 0.0
    hits, total = 0, 0.0
    for i, doc in enumerate(ranking[:k], start=1):
        if doc in rel:
            hits += 1
            total += hits / i
    return total / min(len(rel), k)


def ndcg_at_k(ranking: Sequence[str], judged: Mapping[str, int], k: int, gain: str = "exp") -> float:
    _check_k(k)
    if gain == "exp":
        g = lambda grade: 2.0**grade - 1.0  # noqa: E731
    elif gain == "linear":
        g = float
    else:
        raise ValidationError(f"unknown gain {gain!r}")
    dcg = sum(g(judged.get(doc, 0)) / math.log2(i + 1) for i, doc in enumerate(ranking[:k], start=1))
    ideal = sorted(judged.values(), reverse=True)[:k]
    idcg = sum(g(grade) / math.log2(i + 1) for i, grade in enumerate(ideal, start=1))
    return dcg / idcg if idcg > 0 else 0.0


METRICS = {"recall": recall_at_k, "map": map_at_k, "ndcg": ndcg_at_k}


@dataclass
class MetricReport:
    """Per-query scores and means for every (metric, cutoff) pair."""

    per_query: dict[str, dict[str, float]] = field(default_factory=dict)
    means: dict[str, float] = field(default_factory=dict)
    evaluated: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([self.per_query[q][name] for q in self.evaluated])

    def to_csv(self) -> str:
        names = list(self.means)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["qid"] + names)
        for q in self.evaluated:
            w.writerow([q] + [f"{self.per_query[q][n]:.6f}" for n in names])
        w.writerow(["mean"] + [f"{self.means[n]:.6f}" for n in names])
        return buf.getvalue()

    def to_table(self) -> str:
        names = list(self.means)
        width = max([len(n) for n in names] + [6])
        lines = [" ".join(n.rjust(width) for n in names)]
        lines.append(" ".join(f"{self.means[n]:.4f}".rjust(width) for n in names))
        lines.append(f"queries evaluated: {len(self.evaluated)}  skipped: {len(self.skipped)}")
        return "\n".join(lines)


def evaluate_run(
    run: Mapping[str, Sequence[str]],
    qrels: Mapping[str, Mapping[str, int]],
    cutoffs: Sequence[int] = (20,),
    metrics: Sequence[str] = ("recall", "map", "ndcg"),
    gain: str = "exp",
) -> MetricReport:
    """Score every run query that has at least one relevant passage.

    Queries without a positive judgment (or missing from qrels) are listed
    in ``skipped`` and left out of the means.  A judged query missing from
    the run is scored against an empty ranking.
    """
    report = MetricReport()
    names = [f"{m}@{k}" for m in metrics for k in cutoffs]
    for qid in sorted(set(run) | set(qrels)):
        judged = qrels.get(qid, {})
        if not _relevant(judged):
            report.skipped.append(qid)
            continue
        ranking = list(run.get(qid, []))
        scores = {}
        for m in metrics:
            fn = METRICS[m]
            for k in cutoffs:
                scores[f"{m}@{k}"] = fn(ranking, judged, k, gain) if m == "ndcg" else fn(ranking, judged, k)
        report.per_query[qid] = scores
        report.evaluated.append(qid)
    for n in names:
        vals = [report.per_query[q][n] for q in report.evaluated]
        report.means[n] = float(np.mean(vals)) if vals else 0.0
    return report


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: int
    degenerate: bool = False


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test on per-query scores.

    Zero variance of the differences is flagged as degenerate: identical
    inputs give t = 0, p = 1; a constant non-zero shift gives t = +/-inf, p = 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"length mismatch: {a.size} vs {b.size}")
    n = a.size
    if n < 2:
        raise ValidationError("paired t-test needs at least two pairs")
    diff = a - b
    df = n - 1
    mean = diff.mean()
    sd = diff.std(ddof=1)
    # spread at rounding level (e.g. a + 1.0 - a) counts as zero variance
    if not np.isfinite(sd) or sd <= 1e-12 * np.abs(diff).max():
        if mean == 0.0:
            return TTestResult(0.0, 1.0, df, True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, df, True)
    t = mean / (sd / math.sqrt(n))
    # two-sided tail of Student's t via the regularized incomplete beta
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return TTestResult(float(t), p, df)


def distance_diagnostics(
    g: ManifoldGraph,
    base: EmbeddingMatrix,
    queries: EmbeddingMatrix,
    qrels: Mapping[str, Mapping[str, int]],
    k: int | None = None,
    spectral=None,
    edge_cost_mode: str = "distance",
    n_unjudged: int = 0,
    seed: int = 0,
) -> list[dict]:
    """Euclidean vs manifold distance for judged (and sampled unjudged) pairs.

    One row per judged passage present in the corpus, plus ``n_unjudged``
    randomly sampled unjudged passages per query, labeled irrelevant.
    """
    rng = CounterRNG(seed)
    rows = []
    for qid, q in zip(queries.ids, queries.data64):
        judged = qrels.get(qid)
        if not judged:
            continue
        att = attach_query(g, base, q, k, edge_cost_mode, spectral)
        full = manifold_rank(g, att, None, qid, base.ids)
        d_man = np.empty(base.n_rows)
        hops = np.empty(base.n_rows, dtype=np.int64)
        d_man[full.indices] = full.distances
        hops[full.indices] = full.hops
        picks = [(base.index_of(p), int(grade >= 1)) for p, grade in judged.items() if p in base._index]
        if n_unjudged:
            judged_idx = {i for i, _ in picks}
            pool = np.array([i for i in range(base.n_rows) if i not in judged_idx], dtype=np.int64)
            if pool.size:
                take = min(n_unjudged, pool.size)
                chosen = pool[np.argsort(rng.uniform(pool.size), kind="stable")[:take]]
                picks += [(int(i), 0) for i in np.sort(chosen)]
        for i, rel in picks:
            rows.append(
                {
                    "qid": qid,
                    "pid": base.ids[i],
                    "relevant": rel,
                    "d_euclidean": float(att.tie_distances[i]),
                    "d_manifold": float(d_man[i]),
                    "hops": None if hops[i] < 0 else int(hops[i]),
                }
            )
    return rows


def write_diagnostics(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DIAGNOSTICS_HEADER)
        for r in rows:
            dm = "inf" if math.isinf(r["d_manifold"]) else repr(r["d_manifold"])
            w.writerow([r["qid"], r["pid"], r["relevant"], repr(r["d_euclidean"]), dm, "" if r["hops"] is None else r["hops"]])
