import io
import itertools

import numpy as np
import pytest
import scipy.sparse as sp

from hgwavenet.graph_data import (DynamicGraph, EdgeParseError, NegativeSamplingError, Snapshot,
                                  build_diffusion_stack, gromov_delta_estimate, graph_stats, load_dataset,
                                  load_edge_stream, load_snapshot_dir, normalized_adjacency,
                                  partition_snapshots, resolve_split, sample_negative_edges,
                                  stationary_truncation, synthetic_dynamic_graph, write_edge_stream)

import oracles
from conftest import path_graph


# ---------------------------------------------------------------- ingestion

def test_parse_simple_stream():
    edges, ts, n = load_edge_stream(b"0\t1\t5\n1\t2\t6")
    assert n == 3 and len(edges) == 2
    assert ts.tolist() == [5, 6]


def test_parse_remaps_by_first_appearance():
    edges, _, n = load_edge_stream(io.StringIO("70\t12\t1\n12\t5\t2\n"))
    assert n == 3
    assert edges.tolist() == [[0, 1], [1, 2]]


def test_parse_error_names_line():
    with pytest.raises(EdgeParseError, match="line 1"):
        load_edge_stream(b"a\tb\tc\n")
    with pytest.raises(EdgeParseError, match="line 2"):
        load_edge_stream(b"0\t1\t1\n0\t1\n")


def test_empty_stream_rejected():
    with pytest.raises(EdgeParseError):
        load_edge_stream(b"")


def test_snapshot_canonicalises():
    s = Snapshot(0, [(2, 1), (1, 2), (3, 3), (0, 2)], 4)
    assert s.edges.tolist() == [[0, 2], [1, 2]]
    with pytest.raises(ValueError):
        Snapshot(0, [(0, 9)], 4)


# ---------------------------------------------------------------- partitioning

def test_equal_width_buckets():
    edges = np.array([(i, i + 1) for i in range(10)])
    g = partition_snapshots(edges, np.arange(10), 11, 5, split=3)
    assert [len(s.edges) for s in g.snapshots] == [2] * 5
    assert g.split == 3


def test_single_timestamp_leaves_empty_bucket():
    g = partition_snapshots(np.array([[0, 1], [1, 2]]), np.array([4, 4]), 3, 2, split=1)
    assert len(g.snapshots[0].edges) == 2 and len(g.snapshots[1].edges) == 0
    assert g.warnings == ["snapshot 1 is empty"]


def test_partition_preserves_per_bucket_dedup():
    rng = np.random.default_rng(0)
    edges = rng.integers(0, 8, size=(200, 2))
    ts = rng.integers(0, 1000, size=200)
    g = partition_snapshots(edges, ts, 8, 7, split=5)
    lo, hi = ts.min(), ts.max()
    b = np.minimum(np.floor((ts - lo) / (hi - lo) * 7).astype(int), 6)
    for t in range(7):
        expect = {tuple(sorted(e)) for e, bt in zip(edges.tolist(), b) if bt == t and e[0] != e[1]}
        assert g.snapshots[t].edge_set() == expect


@pytest.mark.parametrize("split,n,expect", [("8:3", 11, 8), ("7:3", 10, 7), (0.7, 10, 7), ("4", 6, 4), (3, 5, 3)])
def test_resolve_split(split, n, expect):
    assert resolve_split(split, n) == expect


def test_split_ratio_must_match():
    with pytest.raises(ValueError):
        resolve_split("8:2", 11)


def test_dynamic_graph_invariants():
    s = [Snapshot(i, [], 3) for i in range(3)]
    with pytest.raises(ValueError):
        DynamicGraph(s, 3)
    with pytest.raises(ValueError):
        DynamicGraph(s, 0)
    with pytest.raises(ValueError):
        DynamicGraph([Snapshot(0, [], 3), Snapshot(1, [], 4)], 1)


def test_snapshot_dir_and_stream_round_trip(tmp_path):
    g = synthetic_dynamic_graph(20, 5, seed=2)
    d = tmp_path / "snapshots"
    d.mkdir()
    for s in g.snapshots:
        (d / f"{s.index:03d}.tsv").write_text("".join(f"{i}\t{j}\n" for i, j in s.edges.tolist()))
    h = load_snapshot_dir(tmp_path, split=g.split)
    assert len(h) == 5 and h.split == g.split
    assert sum(len(s.edges) for s in h.snapshots) == sum(len(s.edges) for s in g.snapshots)
    write_edge_stream(g, tmp_path / "g.tsv")
    k = load_dataset(tmp_path / "g.tsv", "tsv", 5, g.split)
    assert [len(s.edges) for s in k.snapshots] == [len(s.edges) for s in g.snapshots]


# ---------------------------------------------------------------- diffusion

def test_path_graph_normalisation():
    A = normalized_adjacency(path_graph(3)).toarray()
    np.testing.assert_allclose(A[1], [1 / 3, 1 / 3, 1 / 3])
    np.testing.assert_allclose(A[0], [0.5, 0.5, 0])


def test_isolated_node_gets_unit_self_loop():
    A = normalized_adjacency(Snapshot(0, [(0, 1)], 3)).toarray()
    np.testing.assert_array_equal(A[2], [0, 0, 1])


def test_powers_zero_is_identity():
    st = build_diffusion_stack(path_graph(4), 3)
    assert st.K == 3
    np.testing.assert_array_equal(st.powers[0].toarray(), np.eye(4))


def test_triangle_powers_match_dense():
    tri = Snapshot(0, [(0, 1), (1, 2), (0, 2)], 3)
    st = build_diffusion_stack(tri, 2)
    dense = oracles.dense_powers(oracles.dense_normalized_adjacency(3, tri.edges.tolist()), 2)
    for k in range(3):
        np.testing.assert_allclose(st.powers[k].toarray(), dense[k], atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_powers_stochastic_and_dense_equal(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 50))
    e = rng.integers(0, n, size=(int(rng.integers(1, 3 * n)), 2))
    s = Snapshot(0, e, n)
    st = build_diffusion_stack(s, 3)
    dense = oracles.dense_powers(oracles.dense_normalized_adjacency(n, s.edges.tolist()), 3)
    hops = sp.csgraph.shortest_path(normalized_adjacency(s) > 0, unweighted=True)
    for k, P in enumerate(st.powers):
        np.testing.assert_allclose(np.asarray(P.sum(axis=1)).ravel(), 1.0, atol=1e-9)
        np.testing.assert_allclose(P.toarray(), dense[k], atol=1e-12)
        rows, cols = P.nonzero()
        assert np.all(hops[rows, cols] <= k)


def test_stationary_truncation():
    A = normalized_adjacency(path_graph(5)).toarray()
    np.testing.assert_allclose(stationary_truncation(A, 1.0, 4), np.eye(5), atol=1e-15)
    np.testing.assert_allclose(stationary_truncation(np.eye(3), 0.5, 1), 0.75 * np.eye(3), atol=1e-15)
    for alpha, K in [(0.3, 3), (0.5, 6), (0.9, 2)]:
        rows = stationary_truncation(A, alpha, K).sum(axis=1)
        expect = 1 - (1 - alpha) ** (K + 1)  # partial geometric sum
        np.testing.assert_allclose(rows, expect, atol=1e-12)


# ---------------------------------------------------------------- negatives

def test_negatives_tiny_graph():
    b = sample_negative_edges(Snapshot(0, [], 2), 1, seed=0)
    assert tuple(sorted(b.negatives[0])) == (0, 1)


def test_negatives_infeasible():
    with pytest.raises(NegativeSamplingError):
        sample_negative_edges(Snapshot(0, [(0, 1), (1, 2), (0, 2)], 3), 1, seed=0)


def test_negatives_deterministic_and_disjoint(small_graph):
    for s in small_graph.snapshots:
        a = sample_negative_edges(s, len(s.edges), seed=(4, s.index))
        b = sample_negative_edges(s, len(s.edges), seed=(4, s.index))
        np.testing.assert_array_equal(a.negatives, b.negatives)
        assert len(a.negatives) == len(a.positives)
        pos = s.edge_set()
        assert all(i != j and (min(i, j), max(i, j)) not in pos for i, j in a.negatives.tolist())


# ---------------------------------------------------------------- gromov delta

def test_delta_tree_is_zero():
    tree = Snapshot(0, [(0, 1), (0, 2), (1, 3), (1, 4), (2, 5), (2, 6)], 7)
    assert gromov_delta_estimate(tree) == 0.0
    assert oracles.exhaustive_delta(7, tree.edges.tolist()) == 0.0


def test_delta_four_cycle():
    c4 = Snapshot(0, [(0, 1), (1, 2), (2, 3), (0, 3)], 4)
    assert gromov_delta_estimate(c4) == 1.0


@pytest.mark.parametrize("seed", range(4))
def test_delta_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    n = 12
    s = Snapshot(0, rng.integers(0, n, size=(18, 2)), n)
    adj, keep = __import__("hgwavenet.graph_data", fromlist=["x"])._largest_component(s)
    sub = {int(k): i for i, k in enumerate(keep)}
    edges = [(sub[i], sub[j]) for i, j in s.edges.tolist() if i in sub and j in sub]
    assert gromov_delta_estimate(s) == oracles.exhaustive_delta(len(keep), edges)


def test_delta_small_component_warns(caplog):
    assert gromov_delta_estimate(Snapshot(0, [(0, 1), (1, 2)], 5)) == 0.0
    assert "delta reported as 0" in caplog.text


def test_delta_sampled_monotone_in_budget():
    g = synthetic_dynamic_graph(80, 3, seed=1).union()
    vals = [gromov_delta_estimate(g, q, seed=3) for q in (100, 1000, 5000, 20000)]
    assert vals == sorted(vals)


def test_graph_stats_fields(small_graph):
    st = graph_stats(small_graph, 10_000)
    assert set(st) == {"nodes", "edges", "snapshots", "delta_estimate"}
    assert st["nodes"] == 30 and st["snapshots"] == 6
    assert st["edges"] == len(small_graph.union().edges)
