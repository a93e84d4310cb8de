"""Slow reference forward passes in plain Python floats.

Per-node loops over explicit neighbor lists with ascending-index summation
order. Nothing here touches the tape, the kernels or numpy linear algebra,
so it can serve as an independent check of the vectorised engine.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .graph import HeteroGraph, neighbors
from .layers import SHARED, Activation, Intra, Inter, ModelConfig, Update

MAX_NODES = 1000


class OracleSizeError(ValueError):
    pass


@dataclass
class DenseRef:
    node_types: list[str]
    relations: list[tuple[str, str, str]]
    counts: dict[str, int]
    feats: dict[str, list[list[float]]]
    neigh: dict[str, list[list[int]]]


def build_dense_ref(graph: HeteroGraph, features: dict) -> DenseRef:
    if graph.total_nodes > MAX_NODES:
        raise OracleSizeError(f"oracle limited to {MAX_NODES} nodes, graph has {graph.total_nodes}")
    feats = {t: [[float(v) for v in row] for row in features[t]] for t in graph.schema.node_types}
    neigh = {}
    for src_t, rel, dst_t in graph.schema.relations:
        neigh[rel] = [[int(s) for s in neighbors(graph, rel, t)] for t in range(graph.node_counts[dst_t])]
    return DenseRef(list(graph.schema.node_types), list(graph.schema.relations),
                    dict(graph.node_counts), feats, neigh)


# ------------------------------------------------------------ vector helpers


def _mat(t):
    return [[float(v) for v in row] for row in t.data]


def _vec(t):
    return [float(v) for v in t.data.reshape(-1)]


def _matvec(w, x):
    out = []
    for row in w:
        acc = 0.0
        for a, b in zip(row, x):
            acc += a * b
        out.append(acc)
    return out


def _dot(a, b):
    acc = 0.0
    for x, y in zip(a, b):
        acc += x * y
    return acc


def _add(a, b):
    return [x + y for x, y in zip(a, b)]


def _scale(a, c):
    return [x * c for x in a]


def _norm(a):
    return math.sqrt(_dot(a, a))


def _l2norm(a, eps):
    return _scale(a, 1.0 / max(_norm(a), eps))


def _layernorm(a, gamma, beta, eps):
    n = len(a)
    mu = sum(a) / n
    var = sum((x - mu) ** 2 for x in a) / n
    inv = 1.0 / math.sqrt(var + eps)
    return [(x - mu) * inv * g + b for x, g, b in zip(a, gamma, beta)]


def _relu(a):
    return [x if x > 0 else 0.0 for x in a]


def _normalize(e, mode, tol):
    if mode == "softmax":
        m = max(e)
        ex = [math.exp(v - m) for v in e]
        s = sum(ex)
        return [v / s for v in ex]
    s = sum(e)
    if abs(s) <= tol:
        return [1.0 / len(e)] * len(e)
    return [v / s for v in e]


def _pick(d, t):
    return d[t] if t in d else d[SHARED]


def _check(ref: DenseRef):
    total = sum(ref.counts.values())
    if total > MAX_NODES:
        raise OracleSizeError(f"oracle limited to {MAX_NODES} nodes, graph has {total}")


# ------------------------------------------------------------------- models


def rgcn_forward_naive(ref: DenseRef, params, cfg: ModelConfig) -> dict[str, list[list[float]]]:
    """h_t' = act( sum_r mean_{s in N_t^r} W_r h_s + W_node h_t )."""
    _check(ref)
    h = ref.feats
    for lc, lp in zip(cfg.layers, params):
        if lc.intra is not Intra.MEAN or lc.inter is not Inter.SUM or lc.update is not Update.RGCN \
                or lc.norm_enabled:
            raise ValueError("rgcn_forward_naive expects a plain R-GCN layer")
        w_rel = {k: _mat(v) for k, v in lp.w_rel.items()}
        new = {}
        for m in ref.node_types:
            w_node = _mat(_pick(lp.w_node, m))
            bias = _vec(_pick(lp.b_node, m)) if lp.b_node else None
            rows = []
            for t in range(ref.counts[m]):
                acc = [0.0] * lc.out_dim
                for src_t, rel, dst_t in ref.relations:
                    if dst_t != m:
                        continue
                    nbrs = ref.neigh[rel][t]
                    for s in nbrs:
                        acc = _add(acc, _scale(_matvec(w_rel[rel], h[src_t][s]), 1.0 / len(nbrs)))
                out = _add(acc, _matvec(w_node, h[m][t]))
                if bias is not None:
                    out = _add(out, bias)
                rows.append(_relu(out) if lc.activation is Activation.RELU else out)
            new[m] = rows
        h = new
    return h


def rgsn_forward_naive(ref: DenseRef, params, cfg: ModelConfig) -> dict[str, list[list[float]]]:
    """Full-graph R-GSN: SIM-ATTN intra, SIM inter, MsgNorm + LayerNorm update."""
    for lc in cfg.layers:
        if lc.intra is not Intra.SIM_ATTN or lc.inter is not Inter.SIM or lc.update is not Update.RGSN:
            raise ValueError("rgsn_forward_naive expects a full R-GSN layer")
    return forward_naive(ref, params, cfg)


def _intra_row(lc, w, attn, h_src, nbrs):
    eps = lc.l2_eps
    if not nbrs:
        return [0.0] * lc.out_dim
    acc = [0.0] * lc.out_dim
    if lc.intra is Intra.MEAN:
        for s in nbrs:
            acc = _add(acc, _scale(_matvec(w, h_src[s]), 1.0 / len(nbrs)))
    else:
        mean_raw = [0.0] * lc.in_dim
        for s in nbrs:
            mean_raw = _add(mean_raw, h_src[s])
        mean_unit = _l2norm(_scale(mean_raw, 1.0 / len(nbrs)), eps)
        e = [_dot(attn, _l2norm(h_src[s], eps) + mean_unit) for s in nbrs]
        a = _normalize(e, lc.coeff_mode, lc.coeff_tol)
        for ai, s in zip(a, nbrs):
            acc = _add(acc, _scale(_matvec(w, h_src[s]), ai))
    return _l2norm(acc, eps) if lc.norm_enabled else acc


def _relation_weights(lc, h_rel, rels, n):
    if lc.inter is Inter.SUM:
        return [1.0] * len(rels)
    eps = lc.l2_eps
    rel_mean = {}
    for rel in rels:
        acc = [0.0] * lc.out_dim
        for t in range(n):
            acc = _add(acc, h_rel[rel][t])
        rel_mean[rel] = acc
    overall = [0.0] * lc.out_dim
    for rel in rels:
        overall = _add(overall, rel_mean[rel])
    overall_unit = _l2norm(_scale(overall, 1.0 / (len(rels) * n)), eps)
    e = [_dot(_l2norm(_scale(rel_mean[rel], 1.0 / n), eps), overall_unit) for rel in rels]
    return _normalize(e, lc.coeff_mode, lc.coeff_tol)


def forward_naive(ref: DenseRef, params, cfg: ModelConfig) -> dict[str, list[list[float]]]:
    """Any knob combination, one target and one neighbor at a time."""
    _check(ref)
    h = ref.feats
    for lc, lp in zip(cfg.layers, params):
        eps = lc.l2_eps
        if lc.input_norm:
            h = {m: [_layernorm(x, _vec(_pick(lp.ln_in, m)[0]), _vec(_pick(lp.ln_in, m)[1]), lc.ln_eps)
                     for x in h[m]] for m in ref.node_types}
        h_rel = {}
        for src_t, rel, dst_t in ref.relations:
            w = _mat(lp.w_rel[rel])
            attn = _vec(lp.attn[rel]) if rel in lp.attn else None
            h_rel[rel] = [_intra_row(lc, w, attn, h[src_t], ref.neigh[rel][t])
                          for t in range(ref.counts[dst_t])]
        new = {}
        for m in ref.node_types:
            n = ref.counts[m]
            rels = [rel for _, rel, dst_t in ref.relations if dst_t == m]
            b = _relation_weights(lc, h_rel, rels, n) if rels and n else []
            w_node = _mat(_pick(lp.w_node, m))
            bias = _vec(_pick(lp.b_node, m)) if lp.b_node else None
            rows = []
            for t in range(n):
                h_s = [0.0] * lc.out_dim
                for bi, rel in zip(b, rels):
                    h_s = _add(h_s, _scale(h_rel[rel][t], bi))
                z = _matvec(w_node, h[m][t])
                if bias is not None:
                    z = _add(z, bias)
                if lc.update is Update.RGSN:
                    s_scale = _vec(_pick(lp.msg_scale, m))[0]
                    gamma, beta = (_vec(v) for v in _pick(lp.ln_out, m))
                    msg = _scale(h_s, s_scale * _norm(z) / max(_norm(h_s), eps))
                    out = _layernorm(_add(msg, z), gamma, beta, lc.ln_eps)
                else:
                    out = _add(h_s, z)
                rows.append(_relu(out) if lc.activation is Activation.RELU else out)
            new[m] = rows
        h = new
    return h


def homogeneous_gnn(features, neigh, w, w_node, activation=True):
    """The single-type, single-relation model: act(mean_s W h_s + W_node h_t)."""
    out = []
    for t, nbrs in enumerate(neigh):
        acc = [0.0] * len(w)
        for s in nbrs:
            acc = _add(acc, _matvec(w, features[s]))
        if nbrs:
            acc = _scale(acc, 1.0 / len(nbrs))
        row = _add(acc, _matvec(w_node, features[t]))
        out.append(_relu(row) if activation else row)
    return out
