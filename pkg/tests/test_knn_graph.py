import struct
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from madpr.embeddings import Metric, from_rows
from madpr.errors import FormatError, ValidationError
from madpr.knn_graph import (
    Cost,
    build_knn_graph,
    connected_components,
    degree_stats,
    graph_from_bytes,
    knn_query,
    knn_table,
    load_graph,
    save_graph,
)
from oracles import brute_knn_edges, graph_from_edges


def edge_costs(g):
    out = {}
    for i in range(g.n_vertices):
        nb, cs = g.neighbors_of(i)
        for j, c in zip(nb.tolist(), cs.tolist()):
            if i < j:
                out[(i, j)] = c
    return out


def test_knn_query_number_line(line3):
    res = knn_query(line3, np.array([0.9, 0.0]), 2)
    assert [i for i, _ in res] == [1, 0]
    assert [d for _, d in res] == pytest.approx([0.1, 0.9], abs=1e-12)


def test_knn_query_exclusion_and_clamp(line3):
    assert knn_query(line3, line3.data64[0], 1, exclude=0) == [(1, 1.0)]
    assert len(knn_query(line3, np.zeros(2), 5)) == 3
    assert len(knn_query(line3, np.zeros(2), 5, exclude=0)) == 2
    with pytest.raises(ValidationError):
        knn_query(line3, np.zeros(2), 0)


def test_knn_query_ties_by_index():
    m = from_rows([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [5.0, 5.0]])
    assert [i for i, _ in knn_query(m, np.zeros(2), 3)] == [0, 1, 2]


def test_collinear_k1_graph():
    m = from_rows([[0.0], [1.0], [10.0]])
    g = build_knn_graph(m, 1)
    assert edge_costs(g) == {(0, 1): 1.0, (1, 2): 9.0}
    assert g.degrees.tolist() == [1, 2, 1]
    uc = build_knn_graph(m, 1, cost=Cost.UC)
    assert edge_costs(uc) == {(0, 1): 1.0, (1, 2): 1.0}


@pytest.mark.parametrize("metric", ["euclidean", "cosine"])
def test_graph_matches_brute_force_closure(rng, metric):
    x = rng.normal(size=(200, 6))
    g = build_knn_graph(from_rows(x), 8, Metric(metric))
    g.validate()
    oracle = brute_knn_edges(x.astype(np.float32).astype(np.float64), 8, metric)
    got = edge_costs(g)
    assert set(got) == set(oracle)
    for e, c in oracle.items():
        assert got[e] == pytest.approx(c, rel=1e-6, abs=1e-7)
    assert g.degrees.min() >= 8


def test_screened_path_is_exact_on_larger_corpus(rng):
    # large enough to take the float32 screening path, with planted exact duplicates and ties
    x = rng.normal(size=(3000, 12)).astype(np.float32)
    x[100] = x[7]
    x[200] = x[7]
    x[300] = -x[7]
    idx, dist = knn_table(from_rows(x), 10)
    from scipy.spatial.distance import cdist

    full = cdist(x.astype(np.float64), x.astype(np.float64))
    np.fill_diagonal(full, np.inf)
    for i in range(0, 3000, 37):
        ref = np.lexsort((np.arange(3000), full[i]))[:10]
        assert idx[i].tolist() == ref.tolist()
    assert set(idx[7][:2].tolist()) == {100, 200}
    assert dist[7][0] == 0.0


def test_k_clamped_with_warning(line3):
    with pytest.warns(UserWarning, match="clamping"):
        g = build_knn_graph(line3, 10)
    assert g.nnz == 6


def test_too_few_points():
    with pytest.raises(ValidationError):
        build_knn_graph(from_rows([[1.0, 2.0]]), 1)


@given(st.integers(2, 40), st.integers(1, 6), st.integers(0, 10_000))
def test_monotone_in_k_and_symmetric(n, k, seed):
    x = np.random.default_rng(seed).normal(size=(n, 3))
    m = from_rows(x)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        g1 = build_knn_graph(m, k)
        g2 = build_knn_graph(m, k + 1)
    g1.validate(check_symmetry=True)
    assert g1.edge_set() <= g2.edge_set()
    assert g1.degrees.min() >= min(k, n - 1)


def test_round_trip_bit_exact(tmp_path, rng):
    g = build_knn_graph(from_rows(rng.normal(size=(60, 4))), 5, Metric.COSINE, Cost.UC)
    save_graph(g, tmp_path / "g.bin")
    back = load_graph(tmp_path / "g.bin")
    assert back == g
    assert back.to_bytes() == (tmp_path / "g.bin").read_bytes()
    assert back.metric is Metric.COSINE and back.cost is Cost.UC and back.k == 5


def test_corrupt_files(tmp_path, rng):
    with pytest.raises(FormatError, match="bad magic"):
        graph_from_bytes(b"")
    g = build_knn_graph(from_rows(rng.normal(size=(20, 3))), 3)
    buf = bytearray(g.to_bytes())
    head = struct.calcsize("<8sIQQBBI")
    # offsets[N] := nnz - 1
    pos = head + 8 * g.n_vertices
    buf[pos : pos + 8] = struct.pack("<Q", g.nnz - 1)
    with pytest.raises(FormatError, match="corrupt CSR"):
        graph_from_bytes(bytes(buf))
    with pytest.raises(FormatError):
        graph_from_bytes(g.to_bytes()[:-2])


def test_degree_stats_examples():
    path = graph_from_edges(3, {(0, 1): 1.0, (1, 2): 1.0})
    st_ = degree_stats(path)
    assert st_.degrees.tolist() == [1, 2, 1]
    assert st_.mean == pytest.approx(4 / 3)
    k4 = graph_from_edges(4, {(i, j): 1.0 for i in range(4) for j in range(i + 1, 4)})
    assert degree_stats(k4).degrees.tolist() == [3, 3, 3, 3]


def test_low_degree_flags_appendage():
    # a clique of 6 with one pendant vertex hanging off vertex 0
    edges = {(i, j): 1.0 for i in range(6) for j in range(i + 1, 6)}
    edges[(0, 6)] = 1.0
    st_ = degree_stats(graph_from_edges(7, edges))
    assert st_.low_degree(10).tolist() == [6]


def test_connected_components():
    g = graph_from_edges(4, {(0, 1): 1.0, (2, 3): 1.0})
    assert connected_components(g)[0] == 2
