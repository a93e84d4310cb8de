"""Four-phase heterogeneous message passing.

A layer runs message transform, intra-relation aggregation,
inter-relation aggregation and status update. R-GCN is
``(MEAN, SUM, RGCN)``; R-GSN is ``(SIM_ATTN, SIM, RGSN)`` with the
normalisation knob on.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import tensor as T
from .graph import HeteroSchema
from .tensor import Tensor

SHARED = "*"


class Intra(str, Enum):
    MEAN = "mean"
    SIM_ATTN = "simattn"


class Inter(str, Enum):
    SUM = "sum"
    SIM = "sim"


class Update(str, Enum):
    RGCN = "rgcn"
    RGSN = "rgsn"


class Activation(str, Enum):
    RELU = "relu"
    IDENTITY = "identity"


@dataclass(frozen=True)
class LayerConfig:
    in_dim: int
    out_dim: int
    intra: Intra = Intra.MEAN
    inter: Inter = Inter.SUM
    update: Update = Update.RGCN
    norm_enabled: bool = False
    activation: Activation = Activation.RELU
    # parameter layout
    node_weight: str = "auto"      # "shared", "per_type", or "auto" (shared iff RGCN update)
    node_bias: bool = False
    norm_per_type: bool = False    # per-type output LayerNorm and MsgNorm scale
    input_norm: bool = False       # LayerNorm on this layer's inputs (first layer only)
    input_norm_per_type: bool = True
    # coefficient normalisation for SIM-ATTN / SIM
    coeff_mode: str = "sum"
    coeff_tol: float = 1e-12
    l2_eps: float = 1e-12
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name, enum in (("intra", Intra), ("inter", Inter), ("update", Update),
                           ("activation", Activation)):
            object.__setattr__(self, name, enum(getattr(self, name)))
        if self.update is Update.RGSN and not self.norm_enabled:
            raise ValueError("the RGSN status update requires norm_enabled")
        if self.node_weight not in ("auto", "shared", "per_type"):
            raise ValueError(f"node_weight must be auto/shared/per_type, got {self.node_weight!r}")
        if self.coeff_mode not in ("sum", "softmax"):
            raise ValueError(f"coeff_mode must be sum or softmax, got {self.coeff_mode!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dimensions must be positive")

    @property
    def per_type_node(self) -> bool:
        if self.node_weight == "auto":
            return self.update is Update.RGSN
        return self.node_weight == "per_type"


@dataclass(frozen=True)
class ModelConfig:
    layers: tuple[LayerConfig, ...]
    num_classes: int
    dropout_p: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        if self.layers:
            if self.layers[-1].activation is not Activation.IDENTITY:
                raise ValueError("the last layer must use the identity activation")
            if self.layers[-1].out_dim != self.num_classes:
                raise ValueError("the last layer must output num_classes columns")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must lie in [0, 1)")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim


LAYOUTS = {
    # one W_node per layer for R-GCN, per-type for R-GSN, per-layer norms
    "default": dict(node_weight="auto", node_bias=False, norm_per_type=False,
                    input_norm_per_type=True),
    # per-type W_node with bias, per-type output norms, one shared input norm
    "ogb": dict(node_weight="per_type", node_bias=True, norm_per_type=True,
                input_norm_per_type=False),
}


def build_model_config(in_dim: int, num_classes: int, hidden: int = 64, num_layers: int = 2,
                       sim_attn: bool = False, sim: bool = False, norm: bool = False,
                       dropout_p: float = 0.5, layout: str = "default",
                       coeff_mode: str = "sum") -> ModelConfig:
    """Translate ablation knobs into a layer stack (in -> hidden ... -> classes)."""
    if (sim_attn or sim) and not norm:
        raise ValueError("SIM-ATTN/SIM rows are only defined with the Norm knob on")
    dims = [in_dim] + [hidden] * (num_layers - 1) + [num_classes]
    extra = LAYOUTS[layout]
    layers = []
    for i in range(num_layers):
        layers.append(LayerConfig(
            in_dim=dims[i], out_dim=dims[i + 1],
            intra=Intra.SIM_ATTN if sim_attn else Intra.MEAN,
            inter=Inter.SIM if sim else Inter.SUM,
            update=Update.RGSN if norm else Update.RGCN,
            norm_enabled=norm,
            activation=Activation.IDENTITY if i == num_layers - 1 else Activation.RELU,
            input_norm=norm and i == 0,
            coeff_mode=coeff_mode,
            **extra,
        ))
    return ModelConfig(tuple(layers), num_classes, dropout_p)


# ------------------------------------------------------------------ params


@dataclass
class LayerParams:
    w_rel: dict[str, Tensor] = field(default_factory=dict)
    w_node: dict[str, Tensor] = field(default_factory=dict)
    b_node: dict[str, Tensor] = field(default_factory=dict)
    attn: dict[str, Tensor] = field(default_factory=dict)
    msg_scale: dict[str, Tensor] = field(default_factory=dict)
    ln_out: dict[str, tuple[Tensor, Tensor]] = field(default_factory=dict)
    ln_in: dict[str, tuple[Tensor, Tensor]] = field(default_factory=dict)

    def named(self):
        """(group/name, tensor) pairs in a fixed order."""
        for k, v in self.w_rel.items():
            yield f"w_rel/{k}", v
        for k, v in self.w_node.items():
            yield f"w_node/{k}", v
        for k, v in self.b_node.items():
            yield f"b_node/{k}", v
        for k, v in self.attn.items():
            yield f"attn/{k}", v
        for k, v in self.msg_scale.items():
            yield f"msgnorm/{k}", v
        for k, (g, b) in self.ln_out.items():
            yield f"ln_out/{k}/gamma", g
            yield f"ln_out/{k}/beta", b
        for k, (g, b) in self.ln_in.items():
            yield f"ln_in/{k}/gamma", g
            yield f"ln_in/{k}/beta", b

    def node_key(self, node_type: str) -> str:
        return node_type if node_type in self.w_node else SHARED

    def astype(self, dtype) -> "LayerParams":
        def cv(t):
            return Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, name=t.name)
        return LayerParams(
            {k: cv(v) for k, v in self.w_rel.items()},
            {k: cv(v) for k, v in self.w_node.items()},
            {k: cv(v) for k, v in self.b_node.items()},
            {k: cv(v) for k, v in self.attn.items()},
            {k: cv(v) for k, v in self.msg_scale.items()},
            {k: (cv(g), cv(b)) for k, (g, b) in self.ln_out.items()},
            {k: (cv(g), cv(b)) for k, (g, b) in self.ln_in.items()},
        )


def _glorot(rng, rows, cols, dtype):
    a = np.sqrt(6.0 / (rows + cols))
    return Tensor(rng.uniform(-a, a, size=(rows, cols)).astype(dtype), requires_grad=True)


def init_layer_params(cfg: LayerConfig, schema: HeteroSchema, rng: np.random.Generator,
                      dtype=np.float32) -> LayerParams:
    d, dp = cfg.in_dim, cfg.out_dim
    p = LayerParams()
    for _, name, _ in schema.relations:
        p.w_rel[name] = _glorot(rng, dp, d, dtype)
    node_keys = list(schema.node_types) if cfg.per_type_node else [SHARED]
    for k in node_keys:
        p.w_node[k] = _glorot(rng, dp, d, dtype)
        if cfg.node_bias:
            p.b_node[k] = Tensor(np.zeros((1, dp), dtype), requires_grad=True)
    if cfg.intra is Intra.SIM_ATTN:
        for _, name, _ in schema.relations:
            p.attn[name] = _glorot(rng, 1, 2 * d, dtype)
    if cfg.norm_enabled:
        norm_keys = list(schema.node_types) if cfg.norm_per_type else [SHARED]
        for k in norm_keys:
            p.msg_scale[k] = Tensor(np.ones((1, 1), dtype), requires_grad=True)
            p.ln_out[k] = (Tensor(np.ones((1, dp), dtype), requires_grad=True),
                           Tensor(np.zeros((1, dp), dtype), requires_grad=True))
    if cfg.input_norm:
        in_keys = list(schema.node_types) if cfg.input_norm_per_type else [SHARED]
        for k in in_keys:
            p.ln_in[k] = (Tensor(np.ones((1, d), dtype), requires_grad=True),
                          Tensor(np.zeros((1, d), dtype), requires_grad=True))
    for name, t in p.named():
        t.name = name
    return p


def init_model_params(cfg: ModelConfig, schema: HeteroSchema, seed: int,
                      dtype=np.float32) -> list[LayerParams]:
    rng = np.random.default_rng(seed)
    return [init_layer_params(lc, schema, rng, dtype) for lc in cfg.layers]


def _key(d: dict, node_type: str):
    return d[node_type] if node_type in d else d[SHARED]


# ------------------------------------------------------------------ phases


def message_transform(params: LayerParams, relation: str, source_feats: Tensor) -> Tensor:
    return T.linear(source_feats, params.w_rel[relation])


def intra_mean(transformed: Tensor, src, dst, num_targets: int) -> Tensor:
    """Mean of in-neighbor rows per target; zero row when there are none."""
    dst = np.asarray(dst, dtype=np.int64)
    deg = np.bincount(dst, minlength=num_targets).astype(transformed.dtype)
    w = 1.0 / np.maximum(deg, 1)
    return T.spmm(transformed, src, dst, num_targets, weight=w[dst])


def sim_attn_coefficients(attn: Tensor, raw_source: Tensor, src, dst, num_targets: int,
                          mode: str = "sum", tol: float = 1e-12, eps: float = 1e-12) -> Tensor:
    """Edge coefficients a_i, one (E, 1) column grouped by target."""
    d = raw_source.cols
    if attn.shape != (1, 2 * d):
        raise T.DimensionError(f"attn must be (1, {2 * d}), got {attn.shape}")
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    unit_src = T.l2norm_rows(raw_source, eps)
    neigh_mean = T.l2norm_rows(intra_mean(raw_source, src, dst, num_targets), eps)
    score_src = T.linear(unit_src, T.slice_cols(attn, 0, d))
    score_mean = T.linear(neigh_mean, T.slice_cols(attn, d, 2 * d))
    e = T.add(T.select_rows(score_src, src), T.select_rows(score_mean, dst))
    return T.normalize_sum(e, dst, num_targets, tol=tol, mode=mode)


def intra_sim_attn(params: LayerParams, relation: str, raw_source: Tensor, transformed: Tensor,
                   src, dst, num_targets: int, normalize: bool = True, mode: str = "sum",
                   tol: float = 1e-12, eps: float = 1e-12) -> Tensor:
    """Similarity-attention weighted sum of transformed neighbor rows."""
    a = sim_attn_coefficients(params.attn[relation], raw_source, src, dst, num_targets,
                              mode=mode, tol=tol, eps=eps)
    out = T.spmm(transformed, src, dst, num_targets, weight=a)
    return T.l2norm_rows(out, eps) if normalize else out


def inter_sum(per_relation: list[Tensor]) -> Tensor:
    return T.add_n(per_relation)


def sim_coefficients(per_relation: list[Tensor], rows=None, mode: str = "sum",
                     tol: float = 1e-12, eps: float = 1e-12) -> Tensor:
    """Relation weights b_r for one row group, shape (|R|, 1)."""
    parts = per_relation if rows is None else [T.select_rows(h, rows) for h in per_relation]
    rel_means = [T.mean_rows(h) for h in parts]
    unit_rel = [T.l2norm_rows(m, eps) for m in rel_means]
    overall = T.l2norm_rows(T.mul_scalar(T.add_n(rel_means), 1.0 / len(rel_means)), eps)
    e = T.concat_rows([T.matmul(u, _transpose_row(overall)) for u in unit_rel])
    return T.normalize_sum(e, np.zeros(len(per_relation), dtype=np.int64), 1, tol=tol, mode=mode)


def _transpose_row(x: Tensor) -> Tensor:
    # (1, d) -> (d, 1) as a differentiable reshape
    out = Tensor(x.data.reshape(-1, 1))
    return T._record("transpose_row", out, (x,), lambda g: (g.reshape(1, -1),))


def inter_sim(per_relation: list[Tensor], type_rows=None, mode: str = "sum",
              tol: float = 1e-12, eps: float = 1e-12) -> Tensor:
    """Similarity-weighted sum over relations, weights computed per node type.

    ``type_rows`` lists disjoint row-index arrays, one per node type; None
    means every row belongs to one type.
    """
    shape = per_relation[0].shape
    for h in per_relation:
        if h.shape != shape:
            raise T.DimensionError(f"inter_sim: shape {h.shape} != {shape}")
    if type_rows is None:
        b = sim_coefficients(per_relation, None, mode, tol, eps)
        terms = [T.mul(h, T.select_rows(b, [i])) for i, h in enumerate(per_relation)]
        return T.add_n(terms)
    n = shape[0]
    group = np.full(n, -1, dtype=np.int64)
    coeffs = []
    for gi, rows in enumerate(type_rows):
        rows = np.asarray(rows, dtype=np.int64)
        group[rows] = gi
        coeffs.append(sim_coefficients(per_relation, rows, mode, tol, eps))
    if np.any(group < 0):
        raise ValueError("type_rows must cover every row")
    b_all = T.concat_cols(coeffs)           # (|R|, groups)
    terms = []
    for i, h in enumerate(per_relation):
        b_r = _transpose_row(T.select_rows(b_all, [i]))   # (groups, 1)
        terms.append(T.mul(h, T.select_rows(b_r, group)))
    return T.add_n(terms)


def status_update_rgcn(w_node: Tensor, h_s: Tensor, h_t: Tensor, bias: Tensor | None = None,
                       activation: Activation = Activation.RELU) -> Tensor:
    out = T.add(h_s, T.linear(h_t, w_node, bias))
    return T.relu(out) if activation is Activation.RELU else out


def status_update_rgsn(w_node: Tensor, scale: Tensor, gamma: Tensor, beta: Tensor, h_s: Tensor,
                       h_t: Tensor, bias: Tensor | None = None,
                       activation: Activation = Activation.RELU, eps: float = 1e-12,
                       ln_eps: float = 1e-5) -> Tensor:
    z = T.linear(h_t, w_node, bias)
    out = T.layernorm(T.add(T.msgnorm(h_s, z, scale, eps), z), gamma, beta, ln_eps)
    return T.relu(out) if activation is Activation.RELU else out


# ------------------------------------------------------------------- layers


def layer_forward(cfg: LayerConfig, params: LayerParams, schema: HeteroSchema, block,
                  inputs: dict[str, Tensor]) -> dict[str, Tensor]:
    """One message-passing layer over a bipartite block.

    ``inputs`` holds features of ``block.src_nodes`` per type; the first
    ``len(block.dst_nodes[t])`` rows of each type are the targets. Returns
    target features per type.
    """
    x = {}
    for t, n_src in ((t, len(v)) for t, v in block.src_nodes.items()):
        if n_src == 0:
            continue
        if t not in inputs:
            raise KeyError(f"missing input features for node type {t!r}")
        h = inputs[t]
        if h.cols != cfg.in_dim or h.rows != n_src:
            raise T.DimensionError(f"input for {t!r} is {h.shape}, expected ({n_src}, {cfg.in_dim})")
        if cfg.input_norm:
            g, b = _key(params.ln_in, t)
            h = T.layernorm(h, g, b, cfg.ln_eps)
        x[t] = h

    per_type: dict[str, list[Tensor]] = {}
    for src_t, rel, dst_t in schema.relations:
        n_dst = len(block.dst_nodes.get(dst_t, ()))
        if n_dst == 0:
            continue
        src, dst = block.edges[rel]
        if src_t not in x:
            # keeps the relation count seen by SIM independent of sampling luck
            ref = next(iter(x.values()))
            per_type.setdefault(dst_t, []).append(
                Tensor(np.zeros((n_dst, cfg.out_dim), dtype=ref.dtype)))
            continue
        transformed = message_transform(params, rel, x[src_t])
        if cfg.intra is Intra.SIM_ATTN:
            h_r = intra_sim_attn(params, rel, x[src_t], transformed, src, dst, n_dst,
                                 normalize=cfg.norm_enabled, mode=cfg.coeff_mode,
                                 tol=cfg.coeff_tol, eps=cfg.l2_eps)
        else:
            h_r = intra_mean(transformed, src, dst, n_dst)
            if cfg.norm_enabled:
                h_r = T.l2norm_rows(h_r, cfg.l2_eps)
        per_type.setdefault(dst_t, []).append(h_r)

    out = {}
    for t in schema.node_types:
        n_dst = len(block.dst_nodes.get(t, ()))
        if n_dst == 0:
            continue
        rels = per_type.get(t)
        if not rels:
            h_s = Tensor(np.zeros((n_dst, cfg.out_dim), dtype=x[t].dtype))
        elif cfg.inter is Inter.SIM:
            h_s = inter_sim(rels, None, cfg.coeff_mode, cfg.coeff_tol, cfg.l2_eps)
        else:
            h_s = inter_sum(rels)
        h_t = T.select_rows(x[t], np.arange(n_dst))
        key = params.node_key(t)
        bias = params.b_node.get(key)
        if cfg.update is Update.RGSN:
            g, b = _key(params.ln_out, t)
            out[t] = status_update_rgsn(params.w_node[key], _key(params.msg_scale, t), g, b,
                                        h_s, h_t, bias, cfg.activation, cfg.l2_eps, cfg.ln_eps)
        else:
            out[t] = status_update_rgcn(params.w_node[key], h_s, h_t, bias, cfg.activation)
    return out


def model_forward(cfg: ModelConfig, params: list[LayerParams], schema: HeteroSchema, batch,
                  inputs: dict[str, Tensor], training: bool = False,
                  dropout_key: tuple[int, ...] | None = None) -> dict[str, Tensor]:
    """Chain layers over the batch's hops (outermost first).

    In training mode dropout runs between layers with masks drawn from a
    Philox stream keyed by ``dropout_key + (layer,)``.
    """
    if len(batch.hops) != len(cfg.layers):
        raise ValueError(f"batch has {len(batch.hops)} hops for {len(cfg.layers)} layers")
    h = inputs
    last = len(cfg.layers) - 1
    for i, (lc, lp, block) in enumerate(zip(cfg.layers, params, batch.hops)):
        h = layer_forward(lc, lp, schema, block, h)
        if i < last and training and cfg.dropout_p > 0:
            rng = dropout_rng(dropout_key or (0,), i)
            h = {t: T.dropout(v, cfg.dropout_p, rng, True) for t, v in h.items()}
    return h


def dropout_rng(key: tuple[int, ...], layer: int) -> np.random.Generator:
    seed = int(key[0]) & 0xFFFFFFFFFFFFFFFF
    counter = [int(k) for k in key[1:]][:3]
    counter = counter + [0] * (3 - len(counter))
    return np.random.Generator(np.random.Philox(key=seed, counter=counter + [layer]))


# ---------------------------------------------------------------- counting


def param_count(cfg: ModelConfig, schema: HeteroSchema,
                embeddings: dict[str, tuple[int, int]] | None = None) -> dict[str, int]:
    """Exact parameter counts per group, computed without allocating."""
    n_rel = len(schema.relations)
    n_types = len(schema.node_types)
    shared = 1 if n_types else 0      # a shared weight exists only if some type uses it
    counts = dict.fromkeys(("w_rel", "w_node", "b_node", "attn", "msgnorm", "ln_out",
                            "ln_in", "embeddings"), 0)
    for lc in cfg.layers:
        d, dp = lc.in_dim, lc.out_dim
        n_node = n_types if lc.per_type_node else shared
        counts["w_rel"] += n_rel * dp * d
        counts["w_node"] += n_node * dp * d
        if lc.node_bias:
            counts["b_node"] += n_node * dp
        if lc.intra is Intra.SIM_ATTN:
            counts["attn"] += n_rel * 2 * d
        if lc.norm_enabled:
            n_norm = n_types if lc.norm_per_type else shared
            counts["msgnorm"] += n_norm
            counts["ln_out"] += n_norm * 2 * dp
        if lc.input_norm:
            counts["ln_in"] += (n_types if lc.input_norm_per_type else shared) * 2 * d
    for rows, dim in (embeddings or {}).values():
        counts["embeddings"] += rows * dim
    counts["total"] = sum(counts.values())
    return counts


def with_layout(cfg: ModelConfig, **changes) -> ModelConfig:
    """Copy a model config, overriding layer fields on every layer."""
    layers = []
    for i, lc in enumerate(cfg.layers):
        kw = dict(changes)
        if "input_norm" in kw:
            kw["input_norm"] = kw["input_norm"] and i == 0
        layers.append(replace(lc, **kw))
    return replace(cfg, layers=tuple(layers))
