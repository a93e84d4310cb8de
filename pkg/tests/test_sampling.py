import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetmp.graph import HeteroGraph, HeteroSchema, neighbors
from hetmp.sampling import full_batch, iter_batches, sample_batch

from _util import random_graph


def _check_block_structure(graph, batch):
    for hop in batch.hops:
        for t, dst in hop.dst_nodes.items():
            np.testing.assert_array_equal(hop.src_nodes[t][: len(dst)], dst)
        for (s_t, rel, d_t) in graph.schema.relations:
            ls, ld = hop.edges[rel]
            for s, d in zip(hop.src_nodes[s_t][ls], hop.dst_nodes[d_t][ld]):
                assert s in neighbors(graph, rel, int(d))
    for outer, inner in zip(batch.hops, batch.hops[1:]):
        for t in graph.schema.node_types:
            np.testing.assert_array_equal(outer.dst_nodes[t], inner.src_nodes[t])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_blocks_are_consistent_and_capped(seed, fanout):
    rng = np.random.default_rng(seed)
    g = random_graph(rng)
    seeds = {"a": rng.choice(g.node_counts["a"], size=1 + rng.integers(g.node_counts["a"]),
                             replace=False)}
    batch = sample_batch(g, seeds, [fanout, fanout], rng_seed=seed)
    _check_block_structure(g, batch)
    for hop in batch.hops:
        for (_, rel, d_t) in g.schema.relations:
            _, ld = hop.edges[rel]
            assert np.bincount(ld, minlength=len(hop.dst_nodes[d_t])).max(initial=0) <= fanout


def test_same_seed_same_batch_and_unbounded_fanout_takes_everything():
    g = random_graph(np.random.default_rng(3))
    a = sample_batch(g, {"a": [0]}, [2, 2], rng_seed=7)
    b = sample_batch(g, {"a": [0]}, [2, 2], rng_seed=7)
    for ha, hb in zip(a.hops, b.hops):
        for rel in ha.edges:
            np.testing.assert_array_equal(ha.edges[rel][0], hb.edges[rel][0])
    full = sample_batch(g, {"a": [0]}, [None], rng_seed=0)
    for (_, rel, _) in g.schema.relations:
        if rel in ("r2", "r3", "r4"):
            assert len(full.hops[0].edges[rel][0]) == len(neighbors(g, rel, 0))


def test_sampling_is_uniform_over_neighbors():
    s = HeteroSchema(["a", "b"], [("a", "r", "b")])
    g = HeteroGraph.from_edge_lists(s, {"a": 6, "b": 1}, [(np.arange(6), np.zeros(6, int))])
    counts = np.zeros(6)
    trials = 3000
    for i in range(trials):
        b = sample_batch(g, {"b": [0]}, [2], rng_seed=i)
        ls, _ = b.hops[0].edges["r"]
        counts[b.hops[0].src_nodes["a"][ls]] += 1
    expected = trials * 2 / 6
    chi2 = ((counts - expected) ** 2 / expected).sum()
    assert chi2 < 20.5  # 5 dof, p ~ 0.001


def test_sampling_with_replacement_draws_exactly_fanout():
    s = HeteroSchema(["a", "b"], [("a", "r", "b")])
    g = HeteroGraph.from_edge_lists(s, {"a": 2, "b": 1}, [([0, 1], [0, 0])])
    b = sample_batch(g, {"b": [0]}, [5], rng_seed=0, replace=True)
    assert len(b.hops[0].edges["r"][0]) == 5


def test_errors():
    g = random_graph(np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_batch(g, {"a": []}, [2], rng_seed=0)
    with pytest.raises(IndexError):
        sample_batch(g, {"a": [10_000]}, [2], rng_seed=0)
    with pytest.raises(KeyError):
        sample_batch(g, {"zzz": [0]}, [2], rng_seed=0)


def test_full_batch_has_every_edge():
    g = random_graph(np.random.default_rng(1))
    fb = full_batch(g, 2)
    assert len(fb.hops) == 2
    assert fb.hops[0].num_edges() == sum(a.num_edges for a in g.adjacency)


def test_prefetch_yields_the_same_batches():
    g = random_graph(np.random.default_rng(2))
    nodes = np.arange(g.node_counts["a"])
    plain = list(iter_batches(g, "a", nodes, 3, [2, 2], 5, 1, prefetch=0))
    ahead = list(iter_batches(g, "a", nodes, 3, [2, 2], 5, 1, prefetch=2))
    assert len(plain) == len(ahead)
    for p, q in zip(plain, ahead):
        np.testing.assert_array_equal(p.seed_nodes["a"], q.seed_nodes["a"])
        for rel in p.hops[0].edges:
            np.testing.assert_array_equal(p.hops[0].edges[rel][0], q.hops[0].edges[rel][0])
    covered = np.sort(np.concatenate([b.seed_nodes["a"] for b in plain]))
    np.testing.assert_array_equal(covered, nodes)
