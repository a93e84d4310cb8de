"""Finite-difference verification of every parameter group."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .graph import HeteroGraph, HeteroSchema, add_reverse_relations
from .layers import build_model_config, model_forward
from .sampling import full_batch
from .train import TrainConfig, gather_inputs, init_state


def tiny_graph(seed: int = 0, feature_dim: int = 4, num_classes: int = 3) -> HeteroGraph:
    """12 nodes over three types, reverse relations added."""
    rng = np.random.default_rng(seed)
    schema = HeteroSchema(["paper", "author", "field"],
                          [("author", "writes", "paper"), ("paper", "cites", "paper"),
                           ("paper", "has_topic", "field")])
    counts = {"paper": 6, "author": 4, "field": 2}
    edges = [
        ([0, 0, 1, 2, 3, 3, 1], [0, 1, 2, 3, 4, 5, 5]),
        ([0, 1, 2, 3, 4, 5, 2], [1, 2, 3, 4, 5, 0, 0]),
        ([0, 1, 2, 3, 4, 5], [0, 0, 1, 1, 0, 1]),
    ]
    labels = np.array([0, 1, 2, 0, 1, 2])
    splits = {"train": np.array([1, 1, 1, 1, 0, 0], bool), "valid": np.array([0, 0, 0, 0, 1, 0], bool),
              "test": np.array([0, 0, 0, 0, 0, 1], bool)}
    g = HeteroGraph.from_edge_lists(
        schema, counts, edges,
        features={"paper": rng.uniform(-1, 1, (6, feature_dim)).astype(np.float32)},
        labels={"paper": labels}, splits={"paper": splits}, num_classes=num_classes)
    return add_reverse_relations(g)


def _groups(name: str) -> str:
    parts = name.split("/")
    return "embeddings" if parts[0] == "emb" else parts[1]


def check_gradients(mode: str = "rgsn", seed: int = 0, h: float = 1e-5, hidden: int = 3,
                    layout: str = "default", corrupt=()) -> dict[str, float]:
    """Worst relative error per parameter group, float64 throughout.

    ``mode`` is ``rgsn``, ``rgcn`` or ``rgcn_norm``. Relative error of a group is ||analytic - numeric|| / max(||analytic||,
    ||numeric||, 1e-10).
    """
    graph = tiny_graph(seed)
    graph.features = {t: f.astype(np.float64) for t, f in graph.features.items()}
    rgsn = mode == "rgsn"
    norm = mode in ("rgsn", "rgcn_norm")
    mc = build_model_config(4, graph.num_classes, hidden, 2, sim_attn=rgsn, sim=rgsn,
                            norm=norm, dropout_p=0.0, layout=layout)
    state = init_state(graph, mc, TrainConfig(seed=seed, ft_enabled=False), dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for _, t in state.named_parameters():
        # move gamma/beta/s off their identity initialisation
        t.data = t.data + rng.normal(0, 0.1, t.shape)
    batch = full_batch(graph, 2)
    nodes = graph.split_nodes("paper", "train")

    def loss_fn():
        inputs = gather_inputs(graph, state, batch.hops[0].src_nodes, np.float64)
        out = model_forward(mc, state.params, graph.schema, batch, inputs)
        logits = T.select_rows(out["paper"], nodes)
        return T.cross_entropy(logits, graph.labels["paper"][nodes])

    T.corrupt_backward(corrupt)
    try:
        state.zero_grad()
        with T.Tape() as tape:
            loss = loss_fn()
            T.backward(tape, loss)
    finally:
        T.corrupt_backward(())
    analytic = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)).copy()
                for n, t in state.named_parameters()}

    worst: dict[str, float] = {}
    for name, t in state.named_parameters():
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * h)
        a = analytic[name]
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-10)
        err = float(np.linalg.norm(a - numeric) / denom)
        g = _groups(name)
        worst[g] = max(worst.get(g, 0.0), err)
    return worst
