import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from madpr.embeddings import from_rows
from madpr.errors import FormatError, ValidationError
from madpr.evaluation import (
    DIAGNOSTICS_HEADER,
    evaluate_run,
    load_qrels,
    map_at_k,
    ndcg_at_k,
    paired_t_test,
    recall_at_k,
    distance_diagnostics,
    write_diagnostics,
)
from madpr.knn_graph import build_knn_graph
from madpr.ranking import attach_query, manifold_rank

# reference values from scipy.stats.ttest_rel, computed once
TTEST_A = [0.1, 0.2, 0.3, 0.4]
TTEST_B = [0.02, 0.13, 0.19, 0.33]
TTEST_T, TTEST_P = 8.71646397262368, 0.0031786676457542457


def test_load_qrels(tmp_path):
    p = tmp_path / "q.txt"
    p.write_text("q1 0 d1 2\nq1 0 d2 0\n")
    assert load_qrels(p) == {"q1": {"d1": 2, "d2": 0}}
    p.write_text("")
    assert load_qrels(p) == {}
    p.write_text("q1 0 d1 1\nq1 0 d1 -1\n")
    with pytest.raises(FormatError, match=":2: negative"):
        load_qrels(p)
    p.write_text("q1 0 d1\n")
    with pytest.raises(FormatError, match=":1: malformed"):
        load_qrels(p)


# (metric, ranking, judgments, k, expected), each enumerated by hand
FIXTURES = [
    ("recall", ["d1", "d2", "x"], {"d1": 1, "d2": 1}, 20, 1.0),
    ("recall", ["d1", "x", "y"], {"d1": 1, "d2": 1, "d3": 1, "d4": 1}, 20, 0.25),
    ("recall", ["d3", "d1", "d2"], {"d1": 1, "d2": 1}, 2, 0.5),
    ("recall", ["d3", "d1", "d2"], {"d1": 2, "d2": 0}, 3, 1.0),
    ("map", ["d1", "x"], {"d1": 1}, 20, 1.0),
    ("map", ["x", "d1"], {"d1": 1}, 20, 0.5),
    ("map", ["d1", "d3", "d2"], {"d1": 1, "d2": 1}, 3, (1 / 1 + 2 / 3) / 2),
    ("map", ["x", "d1", "y", "d2"], {"d1": 1, "d2": 1, "d3": 1}, 2, (1 / 2) / 2),
    ("map", ["d2", "d1"], {"d1": 1, "d2": 1, "d3": 1}, 2, 1.0),
    ("ndcg", ["d1", "d2"], {"d1": 2, "d2": 1}, 20, 1.0),
    ("ndcg", ["x", "d1"], {"d1": 1}, 2, 1 / math.log2(3)),
    ("ndcg", ["x", "y"], {"d1": 1}, 2, 0.0),
    ("ndcg", ["d2", "d1"], {"d1": 2, "d2": 1}, 2, (1 + 3 / math.log2(3)) / (3 + 1 / math.log2(3))),
]
FUNCS = {"recall": recall_at_k, "map": map_at_k, "ndcg": ndcg_at_k}


@pytest.mark.parametrize("metric,ranking,judged,k,expected", FIXTURES)
def test_metric_fixtures(metric, ranking, judged, k, expected):
    assert FUNCS[metric](ranking, judged, k) == pytest.approx(expected, abs=1e-9)


def test_linear_gain():
    v = ndcg_at_k(["d2", "d1"], {"d1": 2, "d2": 1}, 2, gain="linear")
    assert v == pytest.approx((1 + 2 / math.log2(3)) / (2 + 1 / math.log2(3)), abs=1e-12)
    with pytest.raises(ValidationError):
        ndcg_at_k(["d1"], {"d1": 1}, 1, gain="cubic")


def test_cutoff_must_be_positive():
    for fn in FUNCS.values():
        with pytest.raises(ValidationError):
            fn(["d1"], {"d1": 1}, 0)


judgments = st.dictionaries(st.sampled_from([f"d{i}" for i in range(12)]), st.integers(0, 3), min_size=1)


@given(st.permutations([f"d{i}" for i in range(12)]), judgments, st.integers(1, 15))
def test_metric_bounds_and_full_cutoff(ranking, judged, k):
    for fn in FUNCS.values():
        v = fn(ranking, judged, k)
        assert 0.0 <= v <= 1.0 + 1e-12
        assert fn(ranking, judged, 12) == fn(ranking, judged, 100)


@given(
    # a 0.01 grid keeps every transform strictly monotone in float64 too
    st.lists(st.integers(0, 10_000), min_size=12, max_size=12),
    judgments,
    st.sampled_from([lambda d: 3 * d + 1, np.exp, np.sqrt, lambda d: d**3]),
)
def test_rank_invariance_under_monotone_transform(dists, judged, f):
    ids = np.array([f"d{i}" for i in range(12)])
    d = np.array(dists) / 100.0
    r1 = ids[np.lexsort((np.arange(12), d))].tolist()
    r2 = ids[np.lexsort((np.arange(12), f(d)))].tolist()
    for fn in FUNCS.values():
        for k in (1, 5, 12):
            assert fn(r1, judged, k) == fn(r2, judged, k)


@given(st.permutations([f"d{i}" for i in range(8)]), st.integers(1, 8))
def test_map_is_one_iff_relevant_prefix(ranking, n_rel):
    judged = {f"d{i}": 1 for i in range(n_rel)}
    for k in range(1, 9):
        prefix_ok = all(doc in judged for doc in ranking[: min(n_rel, k)])
        assert (map_at_k(ranking, judged, k) == pytest.approx(1.0)) == prefix_ok


def test_evaluate_run_skips_and_means():
    run = {"q1": ["a", "b"], "q2": ["c"], "q3": ["a"]}
    qrels = {"q1": {"a": 1}, "q2": {"c": 0}, "q4": {"z": 2}}
    rep = evaluate_run(run, qrels, cutoffs=(1, 2))
    assert rep.evaluated == ["q1", "q4"]
    assert rep.skipped == ["q2", "q3"]
    assert rep.per_query["q4"]["recall@2"] == 0.0
    for name, mean in rep.means.items():
        assert mean == pytest.approx(np.mean(rep.column(name)), abs=1e-9)
    assert rep.to_csv().splitlines()[0] == "qid,recall@1,recall@2,map@1,map@2,ndcg@1,ndcg@2"
    assert "queries evaluated: 2" in rep.to_table()


def test_ttest_matches_reference():
    res = paired_t_test(TTEST_A, TTEST_B)
    assert res.t == pytest.approx(TTEST_T, rel=1e-9)
    assert res.p == pytest.approx(TTEST_P, abs=1e-4)
    assert not res.degenerate and res.df == 3


def test_ttest_against_scipy_on_random_samples():
    from scipy.stats import ttest_rel

    rng = np.random.default_rng(4)
    for n in (2, 5, 30, 200):
        a, b = rng.random(n), rng.random(n)
        ref = ttest_rel(a, b)
        res = paired_t_test(a, b)
        assert res.t == pytest.approx(ref.statistic, rel=1e-9)
        assert res.p == pytest.approx(ref.pvalue, abs=1e-10)


def test_ttest_degenerate_conventions():
    a = np.linspace(0, 1, 10)
    same = paired_t_test(a, a)
    assert same.degenerate and same.p == 1.0 and same.t == 0.0
    shift = paired_t_test(a + 1.0, a)
    assert shift.degenerate and shift.t == math.inf and shift.p == 0.0
    with pytest.raises(ValidationError):
        paired_t_test([1, 2], [1, 2, 3])
    with pytest.raises(ValidationError):
        paired_t_test([1], [1])


def test_diagnostics_rows(tmp_path):
    base = from_rows([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [50.0, 50.0], [51.0, 50.0]])
    queries = from_rows([[-0.5, 0.0]], ["q1"])
    g = build_knn_graph(base, 1)
    qrels = {"q1": {"p0": 1, "p2": 0, "p3": 1, "missing": 1}}
    rows = distance_diagnostics(g, base, queries, qrels, k=1)
    by_pid = {r["pid"]: r for r in rows}
    assert set(by_pid) == {"p0", "p2", "p3"}
    # 1-hop relevant passage: manifold distance is the query edge, i.e. the euclidean distance
    assert by_pid["p0"]["hops"] == 1
    assert by_pid["p0"]["d_manifold"] == by_pid["p0"]["d_euclidean"] == 0.5
    assert math.isinf(by_pid["p3"]["d_manifold"]) and by_pid["p3"]["hops"] is None

    # re-derive from the ranking output
    full = manifold_rank(g, attach_query(g, base, queries.data64[0], 1), passage_ids=base.ids)
    ref = {pid: d for pid, d, _ in full.entries}
    for r in rows:
        assert r["d_manifold"] == pytest.approx(ref[r["pid"]], abs=1e-6) or math.isinf(ref[r["pid"]])

    write_diagnostics(rows, tmp_path / "d.csv")
    lines = list(csv.reader(open(tmp_path / "d.csv")))
    assert lines[0] == DIAGNOSTICS_HEADER
    assert [l for l in lines if l[1] == "p3"][0][4] == "inf"


def test_diagnostics_unjudged_sample_and_empty(tmp_path):
    rng = np.random.default_rng(0)
    base = from_rows(rng.normal(size=(30, 3)))
    queries = from_rows(rng.normal(size=(2, 3)), ["q1", "q2"])
    g = build_knn_graph(base, 4)
    rows = distance_diagnostics(g, base, queries, {"q1": {"p1": 2}}, n_unjudged=5, seed=3)
    assert len(rows) == 6 and sum(r["relevant"] for r in rows) == 1
    assert rows == distance_diagnostics(g, base, queries, {"q1": {"p1": 2}}, n_unjudged=5, seed=3)
    write_diagnostics(distance_diagnostics(g, base, queries, {}), tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == ",".join(DIAGNOSTICS_HEADER) + "\n"
