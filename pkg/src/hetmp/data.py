"""Graph directories on disk, synthetic mag-shaped graphs, and run reports.

Directory layout::

    schema.json                       node types, counts, dims, relations, num_classes
    <type>.feat.bin                   b"HGF1", u32 rows, u32 cols, float32 LE row-major
    <type>.labels.csv                 node_index,class
    <type>.split.csv                  node_index,{train|valid|test}
    <src>__<name>__<dst>.edges.csv    src_index,dst_index
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import SPLITS, Adjacency, HeteroGraph, HeteroSchema, validate

FEATURE_MAGIC = b"HGF1"


class GraphFormatError(ValueError):
    pass


# ---------------------------------------------------------------- features


def write_features(path, feats: np.ndarray) -> None:
    feats = np.ascontiguousarray(feats, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", feats.shape[0], feats.shape[1]))
        fh.write(feats.tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != FEATURE_MAGIC:
        raise GraphFormatError(f"{path}: bad feature header")
    rows, cols = struct.unpack("<II", raw[4:12])
    body = raw[12:]
    if len(body) != rows * cols * 4:
        raise GraphFormatError(f"{path}: expected {rows}x{cols} floats, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float32)


# -------------------------------------------------------------------- I/O


def _edge_file(rel) -> str:
    return f"{rel[0]}__{rel[1]}__{rel[2]}.edges.csv"


def save_graph(graph: HeteroGraph, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    schema = {
        "node_types": [{"name": t, "count": int(graph.node_counts[t]),
                        "feature_dim": graph.feature_dim(t)} for t in graph.schema.node_types],
        "relations": [list(r) for r in graph.schema.relations],
        "num_classes": int(graph.num_classes),
    }
    (d / "schema.json").write_text(json.dumps(schema, indent=2) + "\n")
    for t, feats in graph.features.items():
        write_features(d / f"{t}.feat.bin", feats)
    for t, lab in graph.labels.items():
        idx = np.flatnonzero(lab >= 0)
        with open(d / f"{t}.labels.csv", "w", newline="") as fh:
            fh.writelines(f"{i},{int(lab[i])}\n" for i in idx)
    for t, masks in graph.splits.items():
        rows = []
        for name in SPLITS:
            if name in masks:
                rows.extend((int(i), name) for i in np.flatnonzero(masks[name]))
        rows.sort()
        with open(d / f"{t}.split.csv", "w", newline="") as fh:
            fh.writelines(f"{i},{name}\n" for i, name in rows)
    for rel, adj in zip(graph.schema.relations, graph.adjacency):
        src, dst = adj.edges()
        with open(d / _edge_file(rel), "w", newline="") as fh:
            fh.writelines(f"{s},{t}\n" for s, t in zip(src.tolist(), dst.tolist()))


def _read_int_pairs(path, what: str):
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (lineno == 1 and not row[0].strip().lstrip("-").isdigit()):
                continue
            if len(row) != 2:
                raise GraphFormatError(f"{path}:{lineno}: expected 2 fields for {what}, got {len(row)}")
            rows.append((lineno, row[0].strip(), row[1].strip()))
    return rows


def _parse_int(path, lineno, text):
    try:
        return int(text)
    except ValueError:
        raise GraphFormatError(f"{path}:{lineno}: {text!r} is not an integer") from None


def load_graph(directory) -> HeteroGraph:
    """Read, canonicalise (sorted neighbor lists) and validate a graph directory."""
    d = Path(directory)
    schema_path = d / "schema.json"
    if not schema_path.exists():
        raise GraphFormatError(f"{schema_path}: missing")
    try:
        meta = json.loads(schema_path.read_text())
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"{schema_path}: {exc}") from None
    types = [nt["name"] for nt in meta["node_types"]]
    counts = {nt["name"]: int(nt["count"]) for nt in meta["node_types"]}
    dims = {nt["name"]: int(nt.get("feature_dim", 0)) for nt in meta["node_types"]}
    schema = HeteroSchema(types, [tuple(r) for r in meta["relations"]])
    num_classes = int(meta.get("num_classes", 0))

    features = {}
    for t in types:
        path = d / f"{t}.feat.bin"
        if dims[t] == 0:
            continue
        if not path.exists():
            raise GraphFormatError(f"{path}: missing (schema declares {dims[t]}-d features)")
        feats = read_features(path)
        if feats.shape != (counts[t], dims[t]):
            raise GraphFormatError(f"{path}: shape {feats.shape} but schema says "
                                   f"({counts[t]}, {dims[t]})")
        features[t] = feats

    labels, splits = {}, {}
    for t in types:
        path = d / f"{t}.labels.csv"
        if path.exists():
            lab = np.full(counts[t], -1, dtype=np.int64)
            for lineno, a, b in _read_int_pairs(path, "labels"):
                i, c = _parse_int(path, lineno, a), _parse_int(path, lineno, b)
                if not 0 <= i < counts[t]:
                    raise GraphFormatError(f"{path}:{lineno}: node {i} outside [0, {counts[t]})")
                if not 0 <= c < num_classes:
                    raise GraphFormatError(f"{path}:{lineno}: class {c} outside [0, {num_classes})")
                lab[i] = c
            labels[t] = lab
        path = d / f"{t}.split.csv"
        if path.exists():
            masks = {s: np.zeros(counts[t], dtype=bool) for s in SPLITS}
            for lineno, a, b in _read_int_pairs(path, "splits"):
                i = _parse_int(path, lineno, a)
                if not 0 <= i < counts[t]:
                    raise GraphFormatError(f"{path}:{lineno}: node {i} outside [0, {counts[t]})")
                if b not in masks:
                    raise GraphFormatError(f"{path}:{lineno}: unknown split {b!r}")
                masks[b][i] = True
            splits[t] = masks

    adjacency = []
    for rel in schema.relations:
        path = d / _edge_file(rel)
        if not path.exists():
            raise GraphFormatError(f"{path}: missing edge file for relation {rel[1]!r}")
        src, dst = [], []
        n_src, n_dst = counts[rel[0]], counts[rel[2]]
        for lineno, a, b in _read_int_pairs(path, "edges"):
            s, t = _parse_int(path, lineno, a), _parse_int(path, lineno, b)
            if not 0 <= s < n_src:
                raise GraphFormatError(f"{path}:{lineno}: source {s} outside [0, {n_src}) "
                                       f"for type {rel[0]!r}")
            if not 0 <= t < n_dst:
                raise GraphFormatError(f"{path}:{lineno}: destination {t} outside [0, {n_dst}) "
                                       f"for type {rel[2]!r}")
            src.append(s)
            dst.append(t)
        adjacency.append(Adjacency.from_edges(src, dst, n_dst))

    graph = HeteroGraph(schema, counts, adjacency, features, labels, splits, num_classes)
    problems = validate(graph)
    if problems:
        raise GraphFormatError(f"{d}: " + "; ".join(problems))
    return graph


# -------------------------------------------------------------- synthetic


MAG_RELATIONS = (
    ("author", "writes", "paper"),
    ("paper", "cites", "paper"),
    ("paper", "has_topic", "field"),
    ("author", "affiliated_with", "institution"),
)


@dataclass
class SynthSpec:
    node_counts: dict[str, int] = field(default_factory=lambda: {
        "paper": 400, "author": 300, "field": 60, "institution": 40})
    relations: list[tuple[str, str, str, int]] = field(default_factory=lambda: [
        ("author", "writes", "paper", 1200),
        ("paper", "cites", "paper", 1200),
        ("paper", "has_topic", "field", 1000),
        ("author", "affiliated_with", "institution", 300),
    ])
    num_classes: int = 4
    feature_dim: int = 16
    class_signal: float = 0.9
    seed: int = 0
    featured_type: str = "paper"

    def __post_init__(self):
        if not 0 <= self.class_signal <= 1:
            raise ValueError("class_signal must lie in [0, 1]")
        if any(c < 1 for c in self.node_counts.values()):
            raise ValueError("node counts must be >= 1")
        if any(r[3] < 0 for r in self.relations):
            raise ValueError("edge counts must be >= 0")
        if self.featured_type not in self.node_counts:
            raise ValueError(f"featured type {self.featured_type!r} not among node types")


PRESETS = {
    # 300 nodes, three types
    "tiny": lambda: SynthSpec(
        node_counts={"paper": 150, "author": 100, "field": 50},
        relations=[("author", "writes", "paper", 450), ("paper", "cites", "paper", 450),
                   ("paper", "has_topic", "field", 300)],
        num_classes=4, feature_dim=16, class_signal=0.9),
    "small": lambda: SynthSpec(),
    # 2,000 nodes, four types, deliberately noisy so the knobs have room to matter
    "ablation": lambda: SynthSpec(
        node_counts={"paper": 800, "author": 800, "field": 250, "institution": 150},
        relations=[("author", "writes", "paper", 2400), ("paper", "cites", "paper", 2400),
                   ("paper", "has_topic", "field", 2000),
                   ("author", "affiliated_with", "institution", 800)],
        num_classes=6, feature_dim=16, class_signal=0.35),
}


def generate_synthetic(spec: SynthSpec) -> HeteroGraph:
    """Seeded labelled heterogeneous graph.

    Every node carries a latent class; only ``featured_type`` exposes
    features and labels. ``class_signal`` scales the separation of class
    feature means and is the probability an edge joins two nodes of the
    same latent class.
    """
    rng = np.random.default_rng(spec.seed)
    types = list(spec.node_counts)
    C = spec.num_classes
    latent = {}
    for t in types:
        n = spec.node_counts[t]
        latent[t] = rng.permutation(np.arange(n) % C)

    means = rng.normal(size=(C, spec.feature_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    means *= 3.0 * spec.class_signal
    ft = spec.featured_type
    feats = means[latent[ft]] + rng.normal(size=(spec.node_counts[ft], spec.feature_dim))

    pools = {t: [np.flatnonzero(latent[t] == c) for c in range(C)] for t in types}
    schema = HeteroSchema(types, [r[:3] for r in spec.relations])
    edge_lists = []
    for src_t, _, dst_t, n_edges in spec.relations:
        src = rng.integers(0, spec.node_counts[src_t], n_edges)
        same = rng.random(n_edges) < spec.class_signal
        dst = rng.integers(0, spec.node_counts[dst_t], n_edges)
        u = rng.random(n_edges)
        for e in np.flatnonzero(same):
            pool = pools[dst_t][latent[src_t][src[e]]]
            if len(pool):
                dst[e] = pool[int(u[e] * len(pool))]
        edge_lists.append((src, dst))

    labels = {ft: latent[ft].astype(np.int64)}
    splits = {ft: stratified_split(latent[ft], C, rng)}
    return HeteroGraph.from_edge_lists(schema, spec.node_counts, edge_lists,
                                       features={ft: feats.astype(np.float32)},
                                       labels=labels, splits=splits, num_classes=C)


# -------------------------------------------------------- ogbn-mag import

# OGB type names to the short names used throughout
OGB_TYPES = {"paper": "paper", "author": "author", "field_of_study": "field",
             "institution": "institution"}


def _ogb_table(path: Path, dtype) -> np.ndarray:
    if not path.exists():
        raise GraphFormatError(f"{path}: missing")
    try:
        return np.loadtxt(path, delimiter=",", dtype=dtype, ndmin=2)
    except ValueError as exc:
        raise GraphFormatError(f"{path}: {exc}") from None


def convert_ogb_mag(root, directory) -> HeteroGraph:
    """Convert an unpacked ogbn-mag release into a graph directory.

    ``root`` is the dataset folder holding ``raw/`` and ``split/time/``
    (``num-node-dict.csv.gz``, ``node-feat/paper``, ``node-label/paper``,
    ``relations/<src>___<rel>___<dst>/edge.csv.gz``). Only the paper type
    carries features; the other types get trainable embeddings at train time.
    """
    root = Path(root)
    raw = root / "raw"
    count_file = raw / "num-node-dict.csv.gz"
    if not count_file.exists():
        raise GraphFormatError(f"{count_file}: missing")
    names = np.loadtxt(count_file, delimiter=",", dtype=str, max_rows=1, ndmin=1)
    values = np.loadtxt(count_file, delimiter=",", dtype=np.int64, skiprows=1, ndmin=1)
    counts = {OGB_TYPES[str(n)]: int(v) for n, v in zip(names, values)}
    rel_dirs = sorted((raw / "relations").glob("*___*___*"))
    if not rel_dirs:
        raise GraphFormatError(f"{raw / 'relations'}: no relation folders")
    relations, edges = [], []
    for rd in rel_dirs:
        src_t, name, dst_t = rd.name.split("___")
        e = _ogb_table(rd / "edge.csv.gz", np.int64)
        relations.append((OGB_TYPES[src_t], name, OGB_TYPES[dst_t]))
        edges.append((e[:, 0], e[:, 1]))
    feats = _ogb_table(raw / "node-feat" / "paper" / "node-feat.csv.gz", np.float32)
    labels = _ogb_table(raw / "node-label" / "paper" / "node-label.csv.gz", np.int64)[:, 0]
    n = counts["paper"]
    splits = {}
    for s in SPLITS:
        mask = np.zeros(n, dtype=bool)
        mask[_ogb_table(root / "split" / "time" / "paper" / f"{s}.csv.gz", np.int64)[:, 0]] = True
        splits[s] = mask
    types = [t for t in ("paper", "author", "field", "institution") if t in counts]
    graph = HeteroGraph.from_edge_lists(
        HeteroSchema(types, relations), {t: counts[t] for t in types}, edges,
        features={"paper": feats}, labels={"paper": labels}, splits={"paper": splits},
        num_classes=int(labels.max()) + 1)
    problems = validate(graph)
    if problems:
        raise GraphFormatError(f"{root}: " + "; ".join(problems[:5]))
    save_graph(graph, directory)
    return graph


def stratified_split(labels: np.ndarray, num_classes: int, rng, fractions=(0.6, 0.2)):
    masks = {s: np.zeros(len(labels), dtype=bool) for s in SPLITS}
    for c in range(num_classes):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_train = int(round(fractions[0] * len(idx)))
        n_valid = int(round(fractions[1] * len(idx)))
        masks["train"][idx[:n_train]] = True
        masks["valid"][idx[n_train:n_train + n_valid]] = True
        masks["test"][idx[n_train + n_valid:]] = True
    return masks


# ---------------------------------------------------------------- reports


def best_epoch_record(history: list[dict]) -> dict:
    """Record with the highest valid accuracy; ties keep the earliest."""
    best = None
    for rec in history:
        if best is None or rec["valid_acc"] > best["valid_acc"]:
            best = rec
    if best is None:
        raise ValueError("empty history")
    return best


def summarize(runs: list[dict]) -> list[dict]:
    """Group runs by config name, preserving first-seen order."""
    order, groups = [], {}
    for run in runs:
        name = run["name"]
        if name not in groups:
            order.append(name)
            groups[name] = []
        groups[name].append(run)
    rows = []
    for name in order:
        rs = groups[name]
        best = [best_epoch_record(r["history"]) for r in rs]
        valid = np.array([b["valid_acc"] for b in best], dtype=np.float64)
        test = np.array([b["test_acc"] for b in best], dtype=np.float64)
        row = {
            "name": name,
            "runs": len(rs),
            "seeds": [r.get("seed") for r in rs],
            "valid_mean": float(valid.mean()),
            "valid_std": float(valid.std()),
            "test_mean": float(test.mean()),
            "test_std": float(test.std()),
        }
        for key in ("knobs", "params"):
            if key in rs[0]:
                row[key] = rs[0][key]
        rows.append(row)
    return rows


def emit_report(runs: list[dict], path, extra: dict | None = None) -> dict:
    """Write the mean/std summary of ``runs`` as pretty JSON and return it."""
    if not runs:
        raise ValueError("emit_report needs at least one run")
    report = {"rows": summarize(runs)}
    if extra:
        report.update(extra)
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def write_runs(runs: list[dict], path) -> None:
    with open(path, "w") as fh:
        for run in runs:
            fh.write(json.dumps(run, sort_keys=True) + "\n")


def read_runs(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
