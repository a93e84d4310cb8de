"""Fanout-limited uniform neighbor sampling into bipartite blocks.

Each hop's block lists the global ids of its source and target nodes per
type. Targets always occupy the first rows of the source side, so a layer
finds a target's own features (the self-path) at the same local index.
"""
from __future__ import annotations

import queue
import threading
from dataclasses import dataclass

import numpy as np

from . import kernels
from .graph import HeteroGraph


@dataclass
class Block:
    src_nodes: dict[str, np.ndarray]
    dst_nodes: dict[str, np.ndarray]
    edges: dict[str, tuple[np.ndarray, np.ndarray]]

    def num_edges(self) -> int:
        return sum(len(s) for s, _ in self.edges.values())


@dataclass
class MiniBatch:
    seed_nodes: dict[str, np.ndarray]
    hops: list[Block]
    rng_seed: int | None = None


def _normalize_seeds(graph: HeteroGraph, seed_nodes) -> dict[str, np.ndarray]:
    if isinstance(seed_nodes, dict):
        items = seed_nodes.items()
    else:
        grouped: dict[str, list[int]] = {}
        for t, i in seed_nodes:
            grouped.setdefault(t, []).append(i)
        items = grouped.items()
    seeds = {}
    for t, ids in items:
        if t not in graph.node_counts:
            raise KeyError(f"unknown node type {t!r}")
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        if len(ids) == 0:
            continue
        if ids.min() < 0 or ids.max() >= graph.node_counts[t]:
            raise IndexError(f"seed id out of range for type {t!r}")
        _, first = np.unique(ids, return_index=True)
        seeds[t] = ids[np.sort(first)]
    if not seeds:
        raise ValueError("empty seed set")
    return seeds


def _fanout_for(fanout, relation: str):
    if isinstance(fanout, dict):
        fanout = fanout.get(relation, fanout.get("*"))
    if fanout is None or fanout == np.inf:
        return None
    fanout = int(fanout)
    if fanout < 1:
        raise ValueError("fanout must be >= 1")
    return fanout


def _sample_with_replacement(adj, targets, fanout, rng):
    degs = adj.indptr[targets + 1] - adj.indptr[targets]
    live = np.flatnonzero(degs > 0)
    u = rng.random((len(live), fanout))
    pick = np.floor(u * degs[live][:, None]).astype(np.int64)
    pick.sort(axis=1)
    edge = adj.indptr[targets[live]][:, None] + pick
    return adj.indices[edge.reshape(-1)], np.repeat(live, fanout)


def sample_batch(graph: HeteroGraph, seed_nodes, fanouts, rng_seed: int,
                 replace: bool = False) -> MiniBatch:
    """Sample one block per layer, walking outward from the seeds.

    ``fanouts`` has one entry per layer (outermost first): an int, a
    ``{relation: int}`` dict (``"*"`` as default) or None for no limit.
    """
    seeds = _normalize_seeds(graph, seed_nodes)
    if not len(fanouts):
        raise ValueError("fanouts must have one entry per layer")
    rng = np.random.default_rng(rng_seed)
    schema = graph.schema
    targets = {t: seeds.get(t, np.zeros(0, np.int64)) for t in schema.node_types}
    hops = []
    for fanout in reversed(list(fanouts)):
        sampled = []
        for (src_t, rel, dst_t), adj in zip(schema.relations, graph.adjacency):
            dst_ids = targets[dst_t]
            k = _fanout_for(fanout, rel)
            if len(dst_ids) == 0:
                sampled.append((np.zeros(0, np.int64), np.zeros(0, np.int64)))
                continue
            if k is not None and replace:
                sampled.append(_sample_with_replacement(adj, dst_ids, k, rng))
                continue
            degs = adj.indptr[dst_ids + 1] - adj.indptr[dst_ids]
            keys = rng.random(int(degs.sum()))
            kk = int(degs.max(initial=0)) if k is None else k
            sampled.append(kernels.sample_neighbors(adj.indptr, adj.indices, dst_ids, kk, keys))
        block = _assemble(schema, targets, sampled)
        hops.append(block)
        targets = block.src_nodes
    hops.reverse()
    return MiniBatch(seeds, hops, rng_seed)


def _assemble(schema, targets, sampled) -> Block:
    src_nodes = {}
    lookup = {}
    for t in schema.node_types:
        own = targets[t]
        found = [s for (st, _, _), (s, _) in zip(schema.relations, sampled) if st == t]
        extra = np.unique(np.concatenate(found)) if found else np.zeros(0, np.int64)
        extra = extra[~np.isin(extra, own)]
        ids = np.concatenate([own, extra]).astype(np.int64)
        src_nodes[t] = ids
        order = np.argsort(ids, kind="stable")
        lookup[t] = (ids[order], order)
    edges = {}
    for (st, rel, _), (gsrc, ldst) in zip(schema.relations, sampled):
        sorted_ids, order = lookup[st]
        lsrc = order[np.searchsorted(sorted_ids, gsrc)] if len(gsrc) else np.zeros(0, np.int64)
        edges[rel] = (lsrc.astype(np.int64), ldst.astype(np.int64))
    return Block(src_nodes, {t: v.copy() for t, v in targets.items()}, edges)


def full_batch(graph: HeteroGraph, num_layers: int, seed_nodes=None) -> MiniBatch:
    """Every node on every hop with every edge; identical blocks replicated."""
    all_nodes = {t: np.arange(n, dtype=np.int64) for t, n in graph.node_counts.items()}
    edges = {}
    for (_, rel, _), adj in zip(graph.schema.relations, graph.adjacency):
        edges[rel] = adj.edges()
    block = Block(all_nodes, all_nodes, edges)
    seeds = all_nodes if seed_nodes is None else _normalize_seeds(graph, seed_nodes)
    return MiniBatch(seeds, [block] * num_layers, None)


def batch_seed(run_seed: int, epoch: int, index: int) -> int:
    """Independent RNG seed per (run, epoch, batch)."""
    ss = np.random.SeedSequence([run_seed & 0xFFFFFFFF, epoch, index])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def iter_batches(graph: HeteroGraph, node_type: str, nodes, batch_size: int, fanouts,
                 run_seed: int, epoch: int, shuffle: bool = True, prefetch: int = 0):
    """Yield sampled minibatches over ``nodes``.

    With ``prefetch > 0`` a worker thread fills a bounded queue ahead of
    the consumer; the batches are the same either way.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    if shuffle:
        order = np.random.default_rng(batch_seed(run_seed, epoch, -1 & 0xFFFF)).permutation(len(nodes))
        nodes = nodes[order]
    chunks = [nodes[i:i + batch_size] for i in range(0, len(nodes), batch_size)]

    def make(i):
        return sample_batch(graph, {node_type: chunks[i]}, fanouts, batch_seed(run_seed, epoch, i))

    if prefetch <= 0:
        for i in range(len(chunks)):
            yield make(i)
        return
    q: queue.Queue = queue.Queue(maxsize=prefetch)
    done = object()

    def worker():
        try:
            for i in range(len(chunks)):
                q.put(make(i))
        except BaseException as exc:  # surfaced in the consumer
            q.put(exc)
        q.put(done)

    threading.Thread(target=worker, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        if isinstance(item, BaseException):
            raise item
        yield item
