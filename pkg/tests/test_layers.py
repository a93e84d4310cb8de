import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetmp.graph import HeteroGraph, HeteroSchema
from hetmp.layers import (LayerConfig, ModelConfig, build_model_config, init_model_params,
                          inter_sim, intra_mean, model_forward, param_count,
                          sim_attn_coefficients, sim_coefficients, Activation, Update)
from hetmp.oracle import (OracleSizeError, build_dense_ref, forward_naive, homogeneous_gnn,
                          rgcn_forward_naive, rgsn_forward_naive)
from hetmp.sampling import full_batch
from hetmp.tensor import Tensor

from _util import perturb, random_features, random_graph

CONFIGS = {
    "rgcn": dict(sim_attn=False, sim=False, norm=False),
    "rgcn_norm": dict(sim_attn=False, sim=False, norm=True),
    "rgsn": dict(sim_attn=True, sim=True, norm=True),
}


def _name(knobs):
    return next(k for k, v in CONFIGS.items() if v == knobs)


def _engine_vs_oracle(seed, knobs, layout="default", dtype=np.float64, empty_prob=0.0):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, empty_prob=empty_prob)
    feats = random_features(rng, g, 5)
    cfg = build_model_config(5, 3, hidden=4, dropout_p=0.0, layout=layout, **knobs)
    params = init_model_params(cfg, g.schema, seed, dtype)
    perturb(params, rng)
    inputs = {t: Tensor(v.astype(dtype)) for t, v in feats.items()}
    out = model_forward(cfg, params, g.schema, full_batch(g, 2), inputs)
    naive = {"rgcn": rgcn_forward_naive, "rgsn": rgsn_forward_naive}.get(_name(knobs), forward_naive)
    ref = naive(build_dense_ref(g, feats), params, cfg)
    return max(np.abs(out[t].data - np.array(ref[t]).reshape(out[t].shape)).max() for t in g.node_counts)


@pytest.mark.parametrize("name", list(CONFIGS))
@pytest.mark.parametrize("layout", ["default", "ogb"])
def test_engine_matches_oracle(name, layout):
    for seed in range(5):
        assert _engine_vs_oracle(seed, CONFIGS[name], layout) <= 1e-9


@pytest.mark.parametrize("name", list(CONFIGS))
def test_engine_matches_oracle_with_empty_relations(name):
    for seed in range(5):
        assert _engine_vs_oracle(seed, CONFIGS[name], empty_prob=0.5) <= 1e-9


def test_float32_engine_close_to_oracle():
    for name in CONFIGS:
        assert _engine_vs_oracle(11, CONFIGS[name], dtype=np.float32) <= 1e-4


def test_homogeneous_reduction_equals_plain_gnn():
    rng = np.random.default_rng(0)
    s = HeteroSchema(["v"], [("v", "e", "v")])
    n = 9
    g = HeteroGraph.from_edge_lists(s, {"v": n}, [(rng.integers(0, n, 20), rng.integers(0, n, 20))])
    x = rng.normal(size=(n, 4))
    cfg = ModelConfig((LayerConfig(4, 3, activation=Activation.IDENTITY),), 3, 0.0)
    params = init_model_params(cfg, s, 0, np.float64)
    w = params[0].w_rel["e"].data
    w_node = next(iter(params[0].w_node.values())).data
    out = model_forward(cfg, params, s, full_batch(g, 1), {"v": Tensor(x)})["v"].data
    neigh = [[int(j) for j in g.adjacency[0].indices[g.adjacency[0].indptr[i]:g.adjacency[0].indptr[i + 1]]]
             for i in range(n)]
    ref = homogeneous_gnn(x.tolist(), neigh, w.tolist(), w_node.tolist(), activation=False)
    np.testing.assert_allclose(out, np.array(ref), atol=1e-12)


def test_intra_mean_examples():
    x = Tensor(np.array([[1.0, 0.0], [0.0, 1.0], [4.0, 4.0]]))
    out = intra_mean(x, [0, 1, 2], [0, 0, 1], 3).data
    np.testing.assert_array_equal(out, [[0.5, 0.5], [4.0, 4.0], [0.0, 0.0]])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["sum", "softmax"]))
def test_attention_coefficients_sum_to_one(seed, mode):
    rng = np.random.default_rng(seed)
    n_src, n_dst, e = rng.integers(1, 8), rng.integers(1, 6), rng.integers(1, 25)
    src, dst = rng.integers(0, n_src, e), rng.integers(0, n_dst, e)
    raw = Tensor(rng.normal(size=(n_src, 3)))
    attn = Tensor(rng.normal(size=(1, 6)))
    a = sim_attn_coefficients(attn, raw, src, dst, n_dst, mode=mode).data.ravel()
    sums = np.bincount(dst, weights=a, minlength=n_dst)
    np.testing.assert_allclose(sums[np.bincount(dst, minlength=n_dst) > 0], 1.0, atol=1e-9)


def test_attention_zero_denominator_is_uniform():
    # two neighbors whose logits cancel exactly
    raw = Tensor(np.array([[1.0, 0.0], [-1.0, 0.0]]))
    attn = Tensor(np.array([[1.0, 0.0, 0.0, 0.0]]))
    a = sim_attn_coefficients(attn, raw, [0, 1], [0, 0], 1).data.ravel()
    np.testing.assert_array_equal(a, [0.5, 0.5])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_relation_weights_sum_to_one(seed, n_rel):
    rng = np.random.default_rng(seed)
    hs = [Tensor(rng.normal(size=(6, 3))) for _ in range(n_rel)]
    b = sim_coefficients(hs).data.ravel()
    assert abs(b.sum() - 1.0) <= 1e-9
    rows = [np.arange(3), np.arange(3, 6)]
    out = inter_sim(hs, rows).data
    b0 = sim_coefficients(hs, rows[0]).data.ravel()
    np.testing.assert_allclose(out[0], sum(bi * h.data[0] for bi, h in zip(b0, hs)), atol=1e-12)


def test_single_relation_weight_is_one():
    h = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
    np.testing.assert_allclose(sim_coefficients([h]).data, [[1.0]], atol=1e-15)


def test_config_validation():
    with pytest.raises(ValueError):
        build_model_config(4, 3, sim_attn=True, norm=False)
    with pytest.raises(ValueError):
        LayerConfig(4, 3, update=Update.RGSN, norm_enabled=False)
    with pytest.raises(ValueError):
        ModelConfig((LayerConfig(4, 3), LayerConfig(5, 3)), 3)


@pytest.mark.parametrize("name", list(CONFIGS))
@pytest.mark.parametrize("layout", ["default", "ogb"])
def test_param_count_matches_allocation(name, layout):
    g = random_graph(np.random.default_rng(0))
    cfg = build_model_config(5, 3, hidden=4, layout=layout, **CONFIGS[name])
    params = init_model_params(cfg, g.schema, 0)
    allocated = {}
    for lp in params:
        for key, t in lp.named():
            group = key.split("/")[0]
            allocated[group] = allocated.get(group, 0) + t.data.size
    counts = param_count(cfg, g.schema)
    for group, n in counts.items():
        if group not in ("total", "embeddings"):
            assert allocated.get(group, 0) == n, group


@pytest.mark.parametrize("name", list(CONFIGS))
def test_param_count_zero_size_schema(name):
    cfg = build_model_config(4, 3, hidden=4, **CONFIGS[name])
    assert param_count(cfg, HeteroSchema([], []), {})["total"] == 0


def test_oracle_refuses_large_graphs():
    s = HeteroSchema(["v"], [("v", "e", "v")])
    g = HeteroGraph.from_edge_lists(s, {"v": 1001}, [([0], [1])])
    with pytest.raises(OracleSizeError):
        build_dense_ref(g, {"v": np.zeros((1001, 1))})


def test_dropout_only_in_training():
    rng = np.random.default_rng(0)
    g = random_graph(rng)
    feats = {t: Tensor(v) for t, v in random_features(rng, g, 5).items()}
    cfg = build_model_config(5, 3, hidden=4, dropout_p=0.5)
    params = init_model_params(cfg, g.schema, 0, np.float64)
    fb = full_batch(g, 2)
    ev1 = model_forward(cfg, params, g.schema, fb, feats)["a"].data
    ev2 = model_forward(cfg, params, g.schema, fb, feats)["a"].data
    tr = model_forward(cfg, params, g.schema, fb, feats, training=True, dropout_key=(1,))["a"].data
    tr2 = model_forward(cfg, params, g.schema, fb, feats, training=True, dropout_key=(1,))["a"].data
    np.testing.assert_array_equal(ev1, ev2)
    np.testing.assert_array_equal(tr, tr2)
    assert not np.array_equal(ev1, tr)
