import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from madpr.embeddings import Metric, from_rows, normalize_l2
from madpr.errors import FormatError, ValidationError
from madpr.knn_graph import Cost, build_knn_graph
from madpr.ranking import (
    UNREACHABLE_SCORE,
    QueryAttachment,
    attach_query,
    flat_rank,
    manifold_rank,
    rank_queries,
    read_run,
    trec_lines,
    write_run,
)
from madpr.spectral import spectral_embed
from oracles import augmented_matrix, bfs_hops, floyd_warshall, graph_from_edges, random_graph


def manual_attachment(nodes, costs, tie):
    return QueryAttachment(np.array(nodes, dtype=np.int64), np.array(costs, dtype=float), np.array(costs, dtype=float), np.asarray(tie, dtype=float))


def test_attach_number_line(line3):
    g = build_knn_graph(line3, 1)
    att = attach_query(g, line3, np.array([0.2, 0.0]), k=2)
    assert att.neighbors.tolist() == [0, 1]
    assert att.edge_costs == pytest.approx([0.2, 0.8], abs=1e-12)
    uni = attach_query(g, line3, np.array([0.2, 0.0]), k=2, edge_cost_mode="uniform")
    assert uni.edge_costs.tolist() == [1.0, 1.0]
    assert uni.base_distances == pytest.approx([0.2, 0.8], abs=1e-12)
    same = attach_query(g, line3, np.array([1.0, 0.0]), k=2)
    assert same.edge_costs[0] == 0.0 and same.neighbors[0] == 1


def test_attach_errors(line3):
    g = build_knn_graph(line3, 1)
    with pytest.raises(ValidationError):
        attach_query(g, line3, np.zeros(2), k=0)
    with pytest.raises(ValidationError):
        attach_query(g, line3, np.zeros(2), edge_cost_mode="hops")
    gs = build_knn_graph(spectral_embed(g, 1), 1, Metric.SPECTRAL)
    with pytest.raises(ValidationError, match="spectral"):
        attach_query(gs, line3, np.zeros(2))


def test_path_graph_uc_hops():
    g = graph_from_edges(3, {(0, 1): 1.0, (1, 2): 1.0}, cost="uc")
    r = manifold_rank(g, manual_attachment([0], [1.0], [0.0, 1.0, 2.0]))
    assert r.indices.tolist() == [0, 1, 2]
    assert r.distances.tolist() == [1.0, 2.0, 3.0]
    assert r.hops.tolist() == [1, 2, 3]


def test_line_dc_example():
    base = from_rows([[0.0, 0.0], [1.0, 0.0], [10.0, 0.0]])
    g = build_knn_graph(base, 1)
    att = attach_query(g, base, np.array([-0.5, 0.0]), k=1)
    r = manifold_rank(g, att)
    assert r.distances.tolist() == pytest.approx([0.5, 1.5, 10.5], abs=1e-12)
    assert r.hops.tolist() == [1, 2, 3]


def test_flat_examples(line3):
    assert flat_rank(line3, np.array([0.9, 0.0])).indices.tolist() == [1, 0, 2]
    tied = from_rows([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    assert flat_rank(tied, np.zeros(2)).indices.tolist() == [0, 1, 2]
    with pytest.raises(ValidationError):
        flat_rank(line3, np.zeros(2), Metric.SPECTRAL)


def test_flat_normalized_euclidean_equals_cosine(rng):
    base = normalize_l2(from_rows(rng.normal(size=(500, 12))))
    for _ in range(10):
        q = rng.normal(size=12)
        q /= np.linalg.norm(q)
        e = flat_rank(base, q, Metric.EUCLIDEAN).indices
        c = flat_rank(base, q, Metric.COSINE).indices
        assert np.array_equal(e, c)


@pytest.mark.parametrize("seed", range(12))
@pytest.mark.parametrize("cost", ["dc", "uc"])
@pytest.mark.parametrize("mode", ["distance", "uniform"])
def test_floyd_warshall_oracle_knn_graphs(seed, cost, mode):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 100))
    base = from_rows(rng.normal(size=(n, 3)))
    g = build_knn_graph(base, int(rng.choice([2, 4, 8])), cost=Cost(cost))
    q = rng.normal(size=3)
    att = attach_query(g, base, q, edge_cost_mode=mode)
    oracle = floyd_warshall(augmented_matrix(g, att.neighbors, att.edge_costs))[n, :n]
    r = manifold_rank(g, att)
    d = np.empty(n)
    d[r.indices] = r.distances
    assert np.allclose(np.where(np.isinf(oracle), -1, oracle), np.where(np.isinf(d), -1, d), atol=1e-6)


def test_floyd_warshall_oracle_disconnected_random_graph():
    rng = np.random.default_rng(77)
    g = random_graph(rng, 60, 0.03)
    att = manual_attachment([0, 5], [0.3, 1.1], rng.random(60))
    oracle = floyd_warshall(augmented_matrix(g, att.neighbors, att.edge_costs))[60, :60]
    r = manifold_rank(g, att)
    d = np.empty(60)
    d[r.indices] = r.distances
    assert np.isinf(oracle).any()
    assert np.array_equal(np.isinf(d), np.isinf(oracle))
    fin = np.isfinite(oracle)
    assert np.allclose(d[fin], oracle[fin], atol=1e-6)
    # unreachable block follows every finite entry, ordered by tie key then index
    inf_pos = np.flatnonzero(np.isinf(r.distances))
    assert inf_pos.min() == np.isfinite(r.distances).sum()
    tail = r.indices[inf_pos]
    assert tail.tolist() == sorted(tail.tolist(), key=lambda i: (att.tie_distances[i], i))
    assert all(h is None for _, d_, h in r.entries if math.isinf(d_))


def test_complete_graph_collapse(rng):
    base = from_rows(rng.normal(size=(200, 8)))
    g = build_knn_graph(base, 199)
    for q in rng.normal(size=(10, 8)):
        att = attach_query(g, base, q)
        assert np.array_equal(manifold_rank(g, att).indices, flat_rank(base, q).indices)


@given(st.integers(0, 10_000))
def test_uc_hop_identity(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 60))
    base = from_rows(rng.normal(size=(n, 2)))
    g = build_knn_graph(base, int(rng.integers(1, 4)), cost=Cost.UC)
    att = attach_query(g, base, rng.normal(size=2), k=int(rng.integers(1, 4)), edge_cost_mode="uniform")
    r = manifold_rank(g, att)
    oracle = bfs_hops(g, att.neighbors)
    for i, d, h in zip(r.indices, r.distances, r.hops):
        if np.isfinite(d):
            assert d == int(d) and d == oracle[i] == h
        else:
            assert oracle[i] == -1


@given(st.integers(0, 10_000), st.integers(0, 40))
def test_early_termination_is_a_prefix(seed, top):
    rng = np.random.default_rng(seed)
    n = 40
    base = from_rows(rng.integers(0, 4, size=(n, 2)).astype(float))  # many exact ties
    g = build_knn_graph(base, 2, cost=Cost(rng.choice(["dc", "uc"])))
    att = attach_query(g, base, rng.integers(0, 4, size=2).astype(float), edge_cost_mode=rng.choice(["distance", "uniform"]))
    full = manifold_rank(g, att)
    part = manifold_rank(g, att, top_k=top)
    assert len(part) == top
    assert np.array_equal(part.indices, full.indices[:top])
    assert np.array_equal(part.distances, full.distances[:top])


@given(st.integers(0, 10_000))
def test_ordering_invariant(seed):
    rng = np.random.default_rng(seed)
    base = from_rows(rng.integers(0, 3, size=(30, 2)).astype(float))
    g = build_knn_graph(base, 2, cost=Cost.UC)
    att = attach_query(g, base, rng.normal(size=2), edge_cost_mode="uniform")
    r = manifold_rank(g, att)
    assert sorted(r.indices.tolist()) == list(range(30))
    keys = [(d, att.tie_distances[i], i) for i, d in zip(r.indices, r.distances)]
    assert keys == sorted(keys)


@given(st.integers(0, 10_000), st.integers(1, 6))
def test_distances_non_increasing_in_k(seed, k):
    rng = np.random.default_rng(seed)
    base = from_rows(rng.normal(size=(30, 3)))
    q = rng.normal(size=3)
    g1, g2 = build_knn_graph(base, k), build_knn_graph(base, k + 1)
    nodes, costs = attach_query(g1, base, q, k=3).neighbors, attach_query(g1, base, q, k=3).edge_costs
    att = manual_attachment(nodes, costs, np.zeros(30))
    d1, d2 = np.empty(30), np.empty(30)
    r1, r2 = manifold_rank(g1, att), manifold_rank(g2, att)
    d1[r1.indices], d2[r2.indices] = r1.distances, r2.distances
    assert (d2 <= d1 + 1e-12).all()


def test_graph_not_mutated(rng):
    base = from_rows(rng.normal(size=(50, 3)))
    g = build_knn_graph(base, 4)
    before = g.to_bytes()
    manifold_rank(g, attach_query(g, base, rng.normal(size=3)))
    assert g.to_bytes() == before


def test_attachment_mismatch(line3):
    g = build_knn_graph(line3, 1)
    with pytest.raises(ValidationError):
        manifold_rank(g, manual_attachment([0], [1.0], [0.0, 1.0]))


def test_trec_output_round_trip(tmp_path, rng):
    g = graph_from_edges(3, {(0, 1): 1.0})
    r = manifold_rank(g, manual_attachment([0], [0.5], [0.0, 1.0, 2.0]), query_id="q1", passage_ids=["a", "b", "c"])
    lines = list(trec_lines(r, "tag"))
    assert lines[0] == "q1 Q0 a 1 -0.5 tag"
    assert lines[2] == f"q1 Q0 c 3 {UNREACHABLE_SCORE!r} tag"
    write_run(tmp_path / "run.txt", [r], "tag")
    assert read_run(tmp_path / "run.txt") == {"q1": ["a", "b", "c"]}
    (tmp_path / "bad.txt").write_text("q1 Q0 a 1\n")
    with pytest.raises(FormatError, match="bad.txt:1"):
        read_run(tmp_path / "bad.txt")


def test_rank_queries_modes(rng):
    base = from_rows(rng.normal(size=(30, 3)))
    queries = from_rows(rng.normal(size=(4, 3)), [f"q{i}" for i in range(4)])
    g = build_knn_graph(base, 3)
    man = rank_queries(g, base, queries, top_k=5)
    flat = rank_queries(None, base, queries, top_k=5)
    assert [r.query_id for r in man] == ["q0", "q1", "q2", "q3"]
    assert all(len(r) == 5 for r in man + flat)
    assert flat[0].method == "flat-euclidean" and man[0].method == "manifold-euclidean-dc"


def test_spectral_metric_ranking(rng):
    base = from_rows(rng.normal(size=(80, 4)))
    g0 = build_knn_graph(base, 6)
    s = spectral_embed(g0, 5)
    gs = build_knn_graph(s, 6, Metric.SPECTRAL)
    r = manifold_rank(gs, attach_query(gs, base, rng.normal(size=4), spectral=s))
    assert sorted(r.indices.tolist()) == list(range(80))
