"""Config-driven pipeline: ingest, graph, rank, eval, with a reuse manifest.

Every stage writes its artifacts into ``output_dir`` and records in
``manifest.json`` the hash of the config keys it depends on plus sha256
fingerprints of its inputs and outputs.  A later run reuses the outputs
when all of that still matches; if an output exists but no longer matches
its record, the stage stops with :class:`StaleArtifactError` unless
``force`` is set.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .embeddings import EMBEDDING_MAGIC, EmbeddingMatrix, Metric, ids_path, load_embeddings, normalize_l2, write_embeddings
from .errors import StaleArtifactError, ValidationError
from .evaluation import distance_diagnostics, evaluate_run, load_qrels, write_diagnostics
from .knn_graph import Cost, ManifoldGraph, build_knn_graph, degree_stats, load_graph, save_graph
from .ranking import rank_queries, read_run, write_run
from .spectral import load_spectral, save_spectral, spectral_embed

log = logging.getLogger(__name__)

STAGES = ("ingest", "graph", "rank", "eval")
MANIFEST = "manifest.json"


@dataclass
class PipelineConfig:
    embeddings: str | None = None
    queries: str | None = None
    qrels: str | None = None
    output_dir: str = "madpr_out"
    k: int = 8
    metric: str = "euclidean"
    cost: str = "dc"
    query_edge_cost: str = "distance"
    spectral_dim: int = 700
    spectral_tol: float = 1e-6
    spectral_weighting: str = "unit"
    normalize: bool = True
    cutoffs: tuple[int, ...] = (20,)
    top_k: int | None = None  # defaults to the largest cutoff
    ndcg_gain: str = "exp"
    seed: int = 0
    threads: int | None = None
    tag: str = "madpr"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.k < 1:
            raise ValidationError(f"k must be >= 1, got {self.k}")
        if self.spectral_dim < 1:
            raise ValidationError(f"spectral_dim must be >= 1, got {self.spectral_dim}")
        if not self.spectral_tol > 0:
            raise ValidationError(f"spectral_tol must be positive, got {self.spectral_tol}")
        if not self.cutoffs or min(self.cutoffs) < 1:
            raise ValidationError(f"cutoffs must be positive, got {self.cutoffs}")
        if self.top_k is not None and self.top_k < 1:
            raise ValidationError(f"top_k must be >= 1, got {self.top_k}")
        if self.threads is not None and self.threads < 1:
            raise ValidationError(f"threads must be >= 1, got {self.threads}")
        Metric(self.metric)
        Cost(self.cost)
        _choice("query_edge_cost", self.query_edge_cost, ("distance", "uniform"))
        _choice("spectral_weighting", self.spectral_weighting, ("unit", "gaussian"))
        _choice("ndcg_gain", self.ndcg_gain, ("exp", "linear"))

    @property
    def rank_depth(self) -> int:
        return self.top_k if self.top_k is not None else max(self.cutoffs)

    def out(self, name: str) -> Path:
        return Path(self.output_dir) / name

    def hash(self, keys: Sequence[str]) -> str:
        payload = {key: _jsonable(getattr(self, key)) for key in keys}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def to_dict(self) -> dict:
        return {f.name: _jsonable(getattr(self, f.name)) for f in dataclasses.fields(self)}


def _choice(name, value, allowed):
    if value not in allowed:
        raise ValidationError(f"{name} must be one of {', '.join(allowed)}; got {value!r}")


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"not a boolean: {s!r}")


def _parse_optional_int(s: str) -> int | None:
    return None if s.strip().lower() in ("", "none", "all") else int(s)


def parse_int_list(s: str) -> tuple[int, ...]:
    """``"20"``, ``"10,20"`` or an inclusive range ``"2..15"``."""
    out = []
    for part in s.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    if not out:
        raise ValidationError(f"empty integer list {s!r}")
    return tuple(out)


_PARSERS: dict[str, Callable[[str], object]] = {
    "k": int,
    "spectral_dim": int,
    "spectral_tol": float,
    "normalize": _parse_bool,
    "cutoffs": parse_int_list,
    "top_k": _parse_optional_int,
    "seed": int,
    "threads": _parse_optional_int,
}
CONFIG_KEYS = tuple(f.name for f in dataclasses.fields(PipelineConfig))


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{source}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in CONFIG_KEYS:
            raise ValidationError(f"{source}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = _PARSERS.get(key, str)(val)
        except ValueError as exc:
            raise ValidationError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return values


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Config file values, then non-None ``overrides`` on top (flags win)."""
    values = {}
    if path is not None:
        values = parse_config_text(Path(path).read_text(encoding="utf-8"), str(path))
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in CONFIG_KEYS:
            raise ValidationError(f"unknown config key {key!r}")
        values[key] = val
    return PipelineConfig(**values)


def fingerprint(path) -> str:
    """sha256 of a file, plus its ``.ids`` sidecar for binary embedding files."""
    h = hashlib.sha256()
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"missing input file {p}")
    with open(p, "rb") as fh:
        head = fh.read(len(EMBEDDING_MAGIC))
        h.update(head)
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    side = ids_path(p)
    # CSV and qrels carry their ids inline; an unrelated sibling .ids must not count
    if head == EMBEDDING_MAGIC and side != p and side.exists():
        h.update(side.read_bytes())
    return h.hexdigest()


class Manifest:
    def __init__(self, path: Path):
        self.path = path
        self.data = json.loads(path.read_text()) if path.exists() else {"stages": {}}

    def save(self):
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def check(self, stage: str, config_hash: str, inputs: dict, outputs: list[Path], force: bool) -> bool:
        """True when the recorded outputs can be reused as-is."""
        existing = [p for p in outputs if p.exists()]
        if force or not existing:
            return False
        rec = self.data["stages"].get(stage)
        problem = None
        if rec is None:
            problem = "has no manifest record"
        elif rec["config_hash"] != config_hash:
            problem = "was built with a different configuration"
        elif rec["inputs"] != inputs:
            changed = sorted(k for k in set(inputs) | set(rec["inputs"]) if inputs.get(k) != rec["inputs"].get(k))
            problem = f"was built from different inputs ({', '.join(changed)})"
        elif len(existing) != len(outputs) or any(rec["outputs"].get(str(p)) != fingerprint(p) for p in outputs):
            problem = "was modified or partly deleted since it was written"
        if problem is None:
            return True
        raise StaleArtifactError(
            f"stage '{stage}': {existing[0]} {problem}; rerun with --force to rebuild "
            f"or point output_dir somewhere else"
        )

    def record(self, stage: str, config_hash: str, inputs: dict, outputs: list[Path], config: dict):
        self.data["stages"][stage] = {
            "config_hash": config_hash,
            "inputs": inputs,
            "outputs": {str(p): fingerprint(p) for p in outputs},
        }
        self.data["config"] = config
        self.save()


@dataclass
class PipelineResult:
    status: dict[str, str] = field(default_factory=dict)  # stage -> built | reused
    artifacts: dict[str, str] = field(default_factory=dict)
    report: object = None


def _require(cfg: PipelineConfig, *names):
    for name in names:
        if getattr(cfg, name) is None:
            raise ValidationError(f"config is missing '{name}'")
        if not Path(getattr(cfg, name)).exists():
            raise ValidationError(f"{name} file not found: {getattr(cfg, name)}")


def _ingest_one(src, dst: Path, normalize: bool):
    m = load_embeddings(src)
    if normalize:
        m = normalize_l2(m)
    write_embeddings(m, dst)


def _graph_paths(cfg: PipelineConfig) -> list[Path]:
    if Metric(cfg.metric) is Metric.SPECTRAL:
        return [cfg.out("base_graph.bin"), cfg.out("spectral.bin"), cfg.out("graph.bin")]
    return [cfg.out("graph.bin")]


def load_stage_inputs(cfg: PipelineConfig):
    base = load_embeddings(cfg.out("passages.emb"), normalized=cfg.normalize)
    queries = load_embeddings(cfg.out("queries.emb"), normalized=cfg.normalize)
    g = load_graph(cfg.out("graph.bin"))
    spec = load_spectral(cfg.out("spectral.bin")) if Metric(cfg.metric) is Metric.SPECTRAL else None
    return base, queries, g, spec


def build_graph_artifacts(cfg: PipelineConfig, base: EmbeddingMatrix, k: int | None = None) -> tuple[ManifoldGraph, object]:
    """Graph under the configured metric; the spectral metric goes through a Euclidean base graph."""
    k = cfg.k if k is None else k
    metric = Metric(cfg.metric)
    if metric is not Metric.SPECTRAL:
        return build_knn_graph(base, k, metric, Cost(cfg.cost), cfg.threads), None
    base_g = build_knn_graph(base, k, Metric.EUCLIDEAN, Cost.DC, cfg.threads)
    spec = spectral_embed(base_g, cfg.spectral_dim, cfg.spectral_weighting, tol=cfg.spectral_tol, seed=cfg.seed)
    g = build_knn_graph(spec, k, Metric.SPECTRAL, Cost(cfg.cost), cfg.threads)
    return g, (base_g, spec)


def run_pipeline(cfg: PipelineConfig, stages: Sequence[str] | None = None, force: bool = False) -> PipelineResult:
    stages = list(STAGES if not stages else stages)
    for s in stages:
        _choice("stage", s, STAGES)
    cfg.validate()
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out_dir / MANIFEST)
    result = PipelineResult()
    cfg_dict = cfg.to_dict()

    def stage(name, keys, inputs, outputs, build):
        h = cfg.hash(keys)
        fps = {key: fingerprint(p) for key, p in inputs.items()}
        if manifest.check(name, h, fps, outputs, force):
            log.info("%s: reusing %s", name, ", ".join(map(str, outputs)))
            result.status[name] = "reused"
        else:
            build()
            manifest.record(name, h, fps, outputs, cfg_dict)
            result.status[name] = "built"
        for p in outputs:
            result.artifacts[p.name] = str(p)

    if "ingest" in stages:
        _require(cfg, "embeddings", "queries")
        p_out, q_out = cfg.out("passages.emb"), cfg.out("queries.emb")

        def do_ingest():
            _ingest_one(cfg.embeddings, p_out, cfg.normalize)
            _ingest_one(cfg.queries, q_out, cfg.normalize)

        stage("ingest", ["normalize"], {"embeddings": cfg.embeddings, "queries": cfg.queries}, [p_out, q_out], do_ingest)

    if "graph" in stages:
        paths = _graph_paths(cfg)

        def do_graph():
            base = load_embeddings(cfg.out("passages.emb"))
            g, extra = build_graph_artifacts(cfg, base)
            if extra is not None:
                save_graph(extra[0], paths[0])
                save_spectral(extra[1], paths[1])
            save_graph(g, paths[-1])

        keys = ["k", "metric", "cost"]
        if Metric(cfg.metric) is Metric.SPECTRAL:
            keys += ["spectral_dim", "spectral_tol", "spectral_weighting", "seed"]
        stage("graph", keys, {"passages": cfg.out("passages.emb")}, paths, do_graph)

    if "rank" in stages:
        run_path = cfg.out("run.txt")

        def do_rank():
            base, queries, g, spec = load_stage_inputs(cfg)
            write_run(run_path, rank_queries(g, base, queries, cfg.k, cfg.rank_depth, cfg.query_edge_cost, spec), cfg.tag)

        inputs = {"passages": cfg.out("passages.emb"), "queries": cfg.out("queries.emb")}
        inputs.update({p.name: p for p in _graph_paths(cfg)})
        stage("rank", ["k", "query_edge_cost", "cutoffs", "top_k", "tag"], inputs, [run_path], do_rank)

    if "eval" in stages:
        _require(cfg, "qrels")
        csv_path, txt_path = cfg.out("report.csv"), cfg.out("report.txt")

        def do_eval():
            rep = evaluate_run(read_run(cfg.out("run.txt")), load_qrels(cfg.qrels), cfg.cutoffs, gain=cfg.ndcg_gain)
            csv_path.write_text(rep.to_csv())
            txt_path.write_text(rep.to_table() + "\n")

        stage(
            "eval",
            ["cutoffs", "ndcg_gain"],
            {"run": cfg.out("run.txt"), "qrels": cfg.qrels},
            [csv_path, txt_path],
            do_eval,
        )
        result.report = evaluate_run(read_run(cfg.out("run.txt")), load_qrels(cfg.qrels), cfg.cutoffs, gain=cfg.ndcg_gain)
    return result


@dataclass
class DiagnoseResult:
    rows: list[dict]
    degrees: object
    flagged: list[tuple[str, str, int]]  # (qid, pid, degree)
    threshold: float


def diagnose(
    cfg: PipelineConfig, percentile: float = 10.0, n_unjudged: int = 0, out: str | None = None
) -> DiagnoseResult:
    """Distance-scatter rows plus the judged-relevant passages with low graph degree."""
    graph_path = cfg.out("graph.bin")
    if not graph_path.exists():
        raise ValidationError(f"graph not found at {graph_path}; run the graph stage first")
    _require(cfg, "qrels")
    base, queries, g, spec = load_stage_inputs(cfg)
    qrels = load_qrels(cfg.qrels)
    rows = distance_diagnostics(
        g, base, queries, qrels, cfg.k, spec, cfg.query_edge_cost, n_unjudged=n_unjudged, seed=cfg.seed
    )
    out_path = Path(out) if out else cfg.out("diagnostics.csv")
    write_diagnostics(rows, out_path)

    stats = degree_stats(g)
    threshold = stats.threshold(percentile)
    low = set(stats.low_degree(percentile).tolist())
    flagged = []
    for qid in sorted(qrels):
        for pid, grade in sorted(qrels[qid].items()):
            if grade >= 1 and pid in base._index and base.index_of(pid) in low:
                flagged.append((qid, pid, int(stats.degrees[base.index_of(pid)])))
    with open(out_path.with_name(out_path.stem + "_degrees.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["qid", "pid", "degree", "threshold"])
        for qid, pid, deg in flagged:
            w.writerow([qid, pid, deg, threshold])
    return DiagnoseResult(rows, stats, flagged, threshold)


def sweep(cfg: PipelineConfig, ks: Sequence[int], out=None) -> list[dict]:
    """Evaluate the full pipeline for each k; one combined table, flat baseline first."""
    _require(cfg, "qrels")
    run_pipeline(cfg, ["ingest"])
    base = load_embeddings(cfg.out("passages.emb"))
    queries = load_embeddings(cfg.out("queries.emb"))
    qrels = load_qrels(cfg.qrels)
    flat_metric = Metric.COSINE if Metric(cfg.metric) is Metric.COSINE else Metric.EUCLIDEAN
    runs = [("flat", rank_queries(None, base, queries, top_k=cfg.rank_depth, flat_metric=flat_metric))]
    for k in ks:
        g, extra = build_graph_artifacts(cfg, base, k)
        spec = extra[1] if extra else None
        runs.append((k, rank_queries(g, base, queries, k, cfg.rank_depth, cfg.query_edge_cost, spec)))
    rows = []
    for k, ranked in runs:
        rep = evaluate_run({r.query_id: r.doc_ids() for r in ranked}, qrels, cfg.cutoffs, gain=cfg.ndcg_gain)
        rows.append({"k": k, **rep.means})
    if out is not None:
        with open(out, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({key: (f"{v:.6f}" if isinstance(v, float) else v) for key, v in r.items()})
    return rows
