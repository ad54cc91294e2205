"""Command-line interface: ``madpr <command> ...``.

Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .baselines import fit_pca, pca_project, save_pca
from .bench import BenchConfig, k_sweep, run_latency_bench, run_manifold_recovery
from .embeddings import Metric, load_embeddings, normalize_l2, write_embeddings
from .errors import ValidationError
from .evaluation import evaluate_run, load_qrels, paired_t_test
from .knn_graph import Cost, build_knn_graph, degree_stats, load_graph, save_graph
from .pipeline import STAGES, diagnose, load_config, parse_int_list, run_pipeline, sweep
from .ranking import rank_queries, read_run, write_run
from .spectral import load_spectral, save_spectral, spectral_embed

log = logging.getLogger("madpr")


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--embeddings")
    p.add_argument("--queries")
    p.add_argument("--qrels")
    p.add_argument("--output-dir")
    p.add_argument("--k", type=int)
    p.add_argument("--metric", choices=[m.value for m in Metric])
    p.add_argument("--cost", choices=[c.value for c in Cost])
    p.add_argument("--query-edge-cost", choices=["distance", "uniform"])
    p.add_argument("--spectral-dim", type=int)
    p.add_argument("--spectral-tol", type=float)
    p.add_argument("--spectral-weighting", choices=["unit", "gaussian"])
    p.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--cutoffs", type=parse_int_list)
    p.add_argument("--top-k", type=int)
    p.add_argument("--ndcg-gain", choices=["exp", "linear"])
    p.add_argument("--seed", type=int)
    p.add_argument("--tag")


_PIPELINE_KEYS = (
    "embeddings queries qrels output_dir k metric cost query_edge_cost spectral_dim spectral_tol "
    "spectral_weighting normalize cutoffs top_k ndcg_gain seed tag"
).split()


def _config_from(args):
    overrides = {key: getattr(args, key) for key in _PIPELINE_KEYS}
    overrides["threads"] = args.threads
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="madpr", description="Manifold-aware dense passage retrieval")
    ap.add_argument("--version", action="version", version=f"madpr {__version__}")
    ap.add_argument("--json-errors", action="store_true", help="print errors as JSON on stderr")
    ap.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate embeddings and write the binary container")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["binary", "csv"])
    p.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=True)

    p = sub.add_parser("build-graph", help="build the symmetric KNN graph")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--metric", choices=[m.value for m in Metric], default="euclidean")
    p.add_argument("--cost", choices=[c.value for c in Cost], default="dc")
    p.add_argument("--spectral", help="spectral embedding file (required for --metric spectral)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("spectral", help="spectral embedding of a graph")
    p.add_argument("--graph", required=True)
    p.add_argument("--spectral-dim", type=int, default=700)
    p.add_argument("--spectral-tol", type=float, default=1e-6)
    p.add_argument("--weighting", choices=["unit", "gaussian"], default="unit")
    p.add_argument("--sigma", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("rank", help="rank passages for every query and write a TREC run")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--graph", help="omit together with --flat for the flat baseline")
    p.add_argument("--spectral")
    p.add_argument("--k", type=int, help="query attachment size (default: the graph's k)")
    p.add_argument("--query-edge-cost", choices=["distance", "uniform"], default="distance")
    p.add_argument("--top-k", type=int, default=20)
    p.add_argument("--flat", choices=["euclidean", "cosine"], help="flat ranking instead of the graph")
    p.add_argument("--tag")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score a run file against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--cutoffs", type=parse_int_list, default=(20,))
    p.add_argument("--ndcg-gain", choices=["exp", "linear"], default="exp")
    p.add_argument("--compare", help="second run file; adds paired t-tests per metric")
    p.add_argument("--csv", help="write the per-query report here")

    p = sub.add_parser("diagnose", help="distance-scatter CSV and low-degree relevant passages")
    _add_pipeline_flags(p)
    p.add_argument("--percentile", type=float, default=10.0)
    p.add_argument("--unjudged", type=int, default=0, help="unjudged passages sampled per query")
    p.add_argument("--out")

    p = sub.add_parser("run", help="run pipeline stages from a config")
    _add_pipeline_flags(p)
    p.add_argument("--stages", default=",".join(STAGES), help=f"comma list from {','.join(STAGES)}")
    p.add_argument("--force", action="store_true", help="rebuild stale artifacts")

    p = sub.add_parser("sweep", help="evaluate a range of k values into one CSV")
    _add_pipeline_flags(p)
    p.add_argument("--ks", type=parse_int_list, required=True, help="e.g. 2..15")
    p.add_argument("--out", required=True)

    bench = sub.add_parser("bench", help="benchmarks").add_subparsers(dest="bench_command", required=True)
    p = bench.add_parser("latency")
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--dims", type=parse_int_list, default=(32, 64, 128, 256, 512, 1024))
    p.add_argument("--k", type=parse_int_list, default=tuple(range(2, 16)))
    p.add_argument("--queries", type=int, default=200)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--top-k", type=int)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p = bench.add_parser("s-curve")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--ambient-d", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--k", type=parse_int_list, default=(8,))
    p.add_argument("--queries", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shape", choices=["s", "line"], default="s")
    p.add_argument("--out")

    base = sub.add_parser("baseline", help="baselines").add_subparsers(dest="baseline_command", required=True)
    p = base.add_parser("pca")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--queries")
    p.add_argument("--dims", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model-out", required=True)
    p.add_argument("--out-dir", help="write projected passages (and queries) here")
    p.add_argument("--run", help="also rank projected queries by Euclidean distance into this run file")
    p.add_argument("--top-k", type=int, default=20)
    return ap


def cmd_ingest(args):
    m = load_embeddings(args.input, args.format)
    if args.normalize:
        m = normalize_l2(m)
    write_embeddings(m, args.out)
    print(f"{m.n_rows} x {m.n_dims} -> {args.out}")


def cmd_build_graph(args):
    metric = Metric(args.metric)
    if metric is Metric.SPECTRAL:
        if not args.spectral:
            raise ValidationError("--metric spectral needs --spectral")
        points = load_spectral(args.spectral)
    else:
        points = load_embeddings(args.embeddings)
    g = build_knn_graph(points, args.k, metric, Cost(args.cost), args.threads)
    save_graph(g, args.out)
    st = degree_stats(g)
    print(f"N={g.n_vertices} nnz={g.nnz} degree mean={st.mean:.2f} min={st.min} max={st.max} -> {args.out}")


def cmd_spectral(args):
    g = load_graph(args.graph)
    s = spectral_embed(g, args.spectral_dim, args.weighting, args.sigma, args.spectral_tol, seed=args.seed)
    save_spectral(s, args.out)
    print(f"{s.n_rows} x {s.n_dims}, eigenvalues [{s.eigenvalues[0]:.6g}, {s.eigenvalues[-1]:.6g}] -> {args.out}")


def cmd_rank(args):
    base = load_embeddings(args.embeddings)
    queries = load_embeddings(args.queries)
    if args.flat:
        ranked = rank_queries(None, base, queries, top_k=args.top_k, flat_metric=Metric(args.flat))
    else:
        if not args.graph:
            raise ValidationError("rank needs --graph (or --flat)")
        g = load_graph(args.graph)
        spec = load_spectral(args.spectral) if args.spectral else None
        ranked = rank_queries(g, base, queries, args.k, args.top_k, args.query_edge_cost, spec)
    write_run(args.out, ranked, args.tag)
    print(f"{len(ranked)} queries -> {args.out}")


def cmd_eval(args):
    qrels = load_qrels(args.qrels)
    rep = evaluate_run(read_run(args.run), qrels, args.cutoffs, gain=args.ndcg_gain)
    print(rep.to_table())
    if args.csv:
        Path(args.csv).write_text(rep.to_csv())
    if args.compare:
        other = evaluate_run(read_run(args.compare), qrels, args.cutoffs, gain=args.ndcg_gain)
        for name in rep.means:
            res = paired_t_test(rep.column(name), other.column(name))
            flag = " (degenerate)" if res.degenerate else ""
            print(f"{name}: t={res.t:.4f} p={res.p:.4g} df={res.df}{flag}")


def cmd_diagnose(args):
    cfg = _config_from(args)
    res = diagnose(cfg, args.percentile, args.unjudged, args.out)
    st = res.degrees
    print(f"{len(res.rows)} diagnostic rows")
    print(f"degree mean={st.mean:.2f} min={st.min} max={st.max} p{args.percentile:g}={res.threshold:g}")
    print(f"{len(res.flagged)} relevant passages at or below the p{args.percentile:g} degree")
    for qid, pid, deg in res.flagged:
        print(f"  {qid} {pid} degree={deg}")


def cmd_run(args):
    cfg = _config_from(args)
    stages = [s.strip() for s in args.stages.split(",") if s.strip()]
    res = run_pipeline(cfg, stages, args.force)
    for stage, status in res.status.items():
        print(f"{stage}: {status}")
    if res.report is not None:
        print(res.report.to_table())


def cmd_sweep(args):
    rows = sweep(_config_from(args), args.ks, args.out)
    print(f"{len(rows)} rows -> {args.out}")


def cmd_bench(args):
    if args.bench_command == "latency":
        cfg = BenchConfig(args.n, tuple(args.dims), tuple(args.k), args.queries, args.warmup, args.seed, args.top_k, args.threads)
        rep = run_latency_bench(cfg)
        rep.write_csv(args.out)
        for r in rep.rows:
            print(f"D={r.dims} K={r.k}: flat {r.flat.mean_ms:.3f}ms manifold {r.manifold.mean_ms:.3f}ms ratio {r.ratio:.2f}")
        return
    if len(args.k) == 1:
        man, euc = run_manifold_recovery(args.n, args.ambient_d, args.noise, args.k[0], args.seed, args.queries, args.shape)
        rows = [{"k": args.k[0], "components": 1, "spearman_manifold": man, "spearman_euclidean": euc}]
    else:
        rows = k_sweep(args.k, args.n, args.ambient_d, args.noise, args.seed, args.queries, args.shape)
    for r in rows:
        print(f"k={r['k']}: spearman manifold {r['spearman_manifold']:.6f} euclidean {r['spearman_euclidean']:.6f}")
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)


def cmd_baseline(args):
    base = load_embeddings(args.embeddings)
    model = fit_pca(base, args.dims, seed=args.seed)
    save_pca(model, args.model_out)
    print(f"PCA {base.n_dims} -> {args.dims}, explained variance {model.explained_variance.sum():.6g}")
    proj = pca_project(model, base)
    qproj = pca_project(model, load_embeddings(args.queries)) if args.queries else None
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_embeddings(proj, out / "passages_pca.emb")
        if qproj is not None:
            write_embeddings(qproj, out / "queries_pca.emb")
    if args.run:
        if qproj is None:
            raise ValidationError("--run needs --queries")
        write_run(args.run, rank_queries(None, proj, qproj, top_k=args.top_k), "pca")


COMMANDS = {
    "ingest": cmd_ingest,
    "build-graph": cmd_build_graph,
    "spectral": cmd_spectral,
    "rank": cmd_rank,
    "eval": cmd_eval,
    "diagnose": cmd_diagnose,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
    "baseline": cmd_baseline,
}


def _fail(args, exc: BaseException, code: int) -> int:
    if getattr(args, "json_errors", False):
        payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        print(json.dumps(payload), file=sys.stderr)
    else:
        print(f"error: {exc}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        return _fail(args, ValidationError("--threads must be >= 1"), 1)
    try:
        COMMANDS[args.command](args)
    except (ValidationError, FileNotFoundError) as exc:
        return _fail(args, exc, 1)
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        log.debug("command failed", exc_info=True)
        return _fail(args, exc, 2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
