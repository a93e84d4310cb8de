"""Typed heterogeneous graph storage.

Adjacency is kept per relation in destination-indexed CSR form: for each
destination node the ascending list of source indices (parallel edges
kept). A graph is treated as immutable once built.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SPLITS = ("train", "valid", "test")


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class HeteroSchema:
    node_types: tuple[str, ...]
    relations: tuple[tuple[str, str, str], ...]

    def __post_init__(self):
        object.__setattr__(self, "node_types", tuple(self.node_types))
        object.__setattr__(self, "relations", tuple(tuple(r) for r in self.relations))
        if len(set(self.node_types)) != len(self.node_types):
            raise SchemaError(f"duplicate node type in {self.node_types}")
        if len(set(self.relations)) != len(self.relations):
            raise SchemaError("duplicate relation triple")
        names = [r[1] for r in self.relations]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate relation name in {names}")
        for src, name, dst in self.relations:
            for t in (src, dst):
                if t not in self.node_types:
                    raise SchemaError(f"relation {name!r} references unknown node type {t!r}")

    @property
    def is_heterogeneous(self) -> bool:
        return len(self.node_types) + len(self.relations) > 2

    def relation_index(self, relation) -> int:
        """Accept an index, a relation name or a full triple."""
        if isinstance(relation, (int, np.integer)):
            if not 0 <= relation < len(self.relations):
                raise IndexError(f"relation index {relation} out of range")
            return int(relation)
        for i, rel in enumerate(self.relations):
            if relation == rel[1] or tuple(relation) == rel:
                return i
        raise IndexError(f"unknown relation {relation!r}")

    def incoming(self, node_type: str) -> list[int]:
        return [i for i, r in enumerate(self.relations) if r[2] == node_type]


@dataclass
class Adjacency:
    """Destination-indexed CSR: sources of dst ``t`` are ``indices[indptr[t]:indptr[t+1]]``."""

    indptr: np.ndarray
    indices: np.ndarray

    @classmethod
    def from_edges(cls, src, dst, num_dst: int) -> "Adjacency":
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        order = np.lexsort((src, dst))
        counts = np.bincount(dst, minlength=num_dst) if len(dst) else np.zeros(num_dst, np.int64)
        indptr = np.zeros(num_dst + 1, dtype=np.int64)
        np.cumsum(counts[:num_dst], out=indptr[1:])
        return cls(indptr, src[order])

    @property
    def num_edges(self) -> int:
        return int(self.indptr[-1])

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """(src, dst) arrays in canonical order."""
        dst = np.repeat(np.arange(len(self.indptr) - 1, dtype=np.int64), self.degrees())
        return self.indices.copy(), dst


@dataclass
class HeteroGraph:
    schema: HeteroSchema
    node_counts: dict[str, int]
    adjacency: list[Adjacency]
    features: dict[str, np.ndarray] = field(default_factory=dict)
    labels: dict[str, np.ndarray] = field(default_factory=dict)
    splits: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    num_classes: int = 0

    @classmethod
    def from_edge_lists(cls, schema, node_counts, edges, **kw) -> "HeteroGraph":
        """Build from ``edges[i] = (src, dst)`` arrays, one per relation."""
        adj = []
        for (src_t, name, dst_t), (s, d) in zip(schema.relations, edges):
            adj.append(Adjacency.from_edges(s, d, node_counts[dst_t]))
        return cls(schema, dict(node_counts), adj, **kw)

    def relation_edges(self, relation) -> tuple[np.ndarray, np.ndarray]:
        return self.adjacency[self.schema.relation_index(relation)].edges()

    def num_edges(self, relation) -> int:
        return self.adjacency[self.schema.relation_index(relation)].num_edges

    @property
    def total_nodes(self) -> int:
        return sum(self.node_counts.values())

    def feature_dim(self, node_type: str) -> int:
        feats = self.features.get(node_type)
        return 0 if feats is None else feats.shape[1]

    def labeled_type(self) -> str:
        for t in self.schema.node_types:
            if t in self.labels:
                return t
        raise ValueError("graph has no labelled node type")

    def split_nodes(self, node_type: str, split: str) -> np.ndarray:
        mask = self.splits.get(node_type, {}).get(split)
        if mask is None:
            return np.zeros(0, dtype=np.int64)
        return np.flatnonzero(mask)


def neighbors(graph: HeteroGraph, relation, target: int) -> np.ndarray:
    """Sorted in-neighbors of ``target`` under ``relation``."""
    ri = graph.schema.relation_index(relation)
    dst_type = graph.schema.relations[ri][2]
    if not 0 <= target < graph.node_counts[dst_type]:
        raise IndexError(f"target {target} out of range for type {dst_type!r}")
    adj = graph.adjacency[ri]
    return adj.indices[adj.indptr[target]:adj.indptr[target + 1]].copy()


def validate(graph: HeteroGraph) -> list[str]:
    """Return one message per broken invariant; empty when the graph is sound."""
    problems = []
    schema = graph.schema
    for t in schema.node_types:
        if t not in graph.node_counts:
            problems.append(f"node type {t!r}: missing node count")
    if len(graph.adjacency) != len(schema.relations):
        problems.append(f"{len(graph.adjacency)} adjacency tables for {len(schema.relations)} relations")
    for (src_t, name, dst_t), adj in zip(schema.relations, graph.adjacency):
        n_src = graph.node_counts.get(src_t, 0)
        n_dst = graph.node_counts.get(dst_t, 0)
        if len(adj.indptr) != n_dst + 1:
            problems.append(f"relation {name!r}: indptr length {len(adj.indptr)} != {n_dst} + 1")
            continue
        if np.any(np.diff(adj.indptr) < 0) or adj.indptr[0] != 0 or adj.indptr[-1] != len(adj.indices):
            problems.append(f"relation {name!r}: malformed indptr")
            continue
        bad = np.flatnonzero((adj.indices < 0) | (adj.indices >= n_src))
        for pos in bad[:5]:
            problems.append(f"relation {name!r}: source index {int(adj.indices[pos])} out of range "
                            f"for type {src_t!r} ({n_src} nodes) at edge {int(pos)}")
        if len(adj.indices) > 1:
            drops = np.diff(adj.indices) < 0
            starts = adj.indptr[1:-1]
            starts = starts[(starts > 0) & (starts < len(adj.indices))]
            drops[starts - 1] = False
            if drops.any():
                pos = int(np.flatnonzero(drops)[0]) + 1
                t = int(np.searchsorted(adj.indptr, pos, side="right") - 1)
                problems.append(f"relation {name!r}: neighbor list of target {t} not sorted")
    for t, feats in graph.features.items():
        n = graph.node_counts.get(t)
        if feats.ndim != 2 or feats.shape[0] != n:
            problems.append(f"node type {t!r}: feature matrix shape {feats.shape} for {n} nodes")
        elif feats.dtype != np.float32:
            problems.append(f"node type {t!r}: features must be float32, got {feats.dtype}")
    for t, lab in graph.labels.items():
        n = graph.node_counts.get(t)
        if len(lab) != n:
            problems.append(f"node type {t!r}: {len(lab)} labels for {n} nodes")
            continue
        labeled = lab >= 0
        out = np.flatnonzero(labeled & (lab >= graph.num_classes))
        for i in out[:5]:
            problems.append(f"node type {t!r}: label {int(lab[i])} of node {int(i)} "
                            f"outside [0, {graph.num_classes})")
    for t, masks in graph.splits.items():
        n = graph.node_counts.get(t, 0)
        lab = graph.labels.get(t)
        labeled = np.zeros(n, dtype=bool) if lab is None else lab >= 0
        union = np.zeros(n, dtype=bool)
        for i, a in enumerate(SPLITS):
            if a not in masks:
                continue
            if len(masks[a]) != n:
                problems.append(f"node type {t!r}: split {a!r} mask length {len(masks[a])} != {n}")
                continue
            for b in SPLITS[i + 1:]:
                if b in masks and len(masks[b]) == n:
                    both = np.flatnonzero(masks[a] & masks[b])
                    if len(both):
                        problems.append(f"node type {t!r}: splits {a!r} and {b!r} overlap "
                                        f"({len(both)} nodes, first {int(both[0])})")
            union |= masks[a]
        if np.any(union != labeled):
            first = int(np.flatnonzero(union != labeled)[0])
            problems.append(f"node type {t!r}: splits do not cover exactly the labelled nodes "
                            f"(first mismatch at node {first})")
    return problems


def reverse_schema(schema: HeteroSchema) -> HeteroSchema:
    """The schema ``add_reverse_relations`` produces, without touching edges."""
    extra = [(d, f"rev_{n}", s) for s, n, d in schema.relations if s != d]
    return HeteroSchema(schema.node_types, list(schema.relations) + extra)


def add_reverse_relations(graph: HeteroGraph) -> HeteroGraph:
    """Make every node type reachable by messages.

    Relations between distinct types gain a ``rev_<name>`` twin; relations
    within one type are symmetrised in place (the union of the edge set and
    its reversal, so applying this twice changes nothing).
    """
    problems = validate(graph)
    if problems:
        raise SchemaError("cannot add reverse relations to an invalid graph: " + problems[0])
    schema = graph.schema
    names = {r[1] for r in schema.relations}
    relations = list(schema.relations)
    adjacency = []
    extra_rel, extra_adj = [], []
    for (src_t, name, dst_t), adj in zip(schema.relations, graph.adjacency):
        src, dst = adj.edges()
        if src_t == dst_t:
            fwd = set(zip(src.tolist(), dst.tolist()))
            missing = [(d, s) for s, d in zip(src.tolist(), dst.tolist()) if (d, s) not in fwd]
            missing = sorted(set(missing))
            if missing:
                ms, md = np.array(missing, dtype=np.int64).T
                src = np.concatenate([src, ms])
                dst = np.concatenate([dst, md])
            adjacency.append(Adjacency.from_edges(src, dst, graph.node_counts[dst_t]))
        else:
            adjacency.append(adj)
            rev = f"rev_{name}"
            if rev in names:
                raise SchemaError(f"reverse relation name {rev!r} already exists")
            names.add(rev)
            extra_rel.append((dst_t, rev, src_t))
            extra_adj.append(Adjacency.from_edges(dst, src, graph.node_counts[src_t]))
    return HeteroGraph(
        HeteroSchema(schema.node_types, relations + extra_rel),
        dict(graph.node_counts),
        adjacency + extra_adj,
        features=graph.features,
        labels=graph.labels,
        splits=graph.splits,
        num_classes=graph.num_classes,
    )
