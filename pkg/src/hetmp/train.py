"""Training: embeddings, AdamW, FLAG, early stopping, evaluation."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .graph import HeteroGraph
from .layers import LayerParams, ModelConfig, init_model_params, model_forward
from .sampling import full_batch, iter_batches
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FlagConfig:
    steps: int = 3
    step_size: float = 1e-3

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("FLAG needs at least one ascent step")
        if self.step_size < 0:
            raise ValueError("FLAG step size must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.004
    weight_decay: float = 0.0
    batch_size: int = 1024
    max_epochs: int = 100
    patience: int = 10
    fanouts: tuple = (10, 10)
    flag: FlagConfig | None = None
    ft_enabled: bool = False
    feature_trainable: bool = True
    seed: int = 0
    prefetch: int = 0
    deterministic: bool = False

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class AdamW:
    """Adam with decoupled weight decay.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
    """

    def __init__(self, lr=0.004, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, named_params) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in named_params:
            if p.grad is None:
                continue
            g = p.grad
            if T._checked and not np.all(np.isfinite(g)):
                raise T.NonFiniteError(f"non-finite gradient for {name}")
            dt = p.dtype.type
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m = self.m[name] = dt(b1) * self.m[name] + dt(1 - b1) * g
            v = self.v[name] = dt(b2) * self.v[name] + dt(1 - b2) * g * g
            m_hat = m / dt(c1)
            v_hat = v / dt(c2)
            update = m_hat / (np.sqrt(v_hat) + dt(self.eps)) + dt(self.weight_decay) * p.data
            p.data = (p.data - dt(self.lr) * update).astype(p.dtype, copy=False)


# ------------------------------------------------------------------ state


@dataclass
class TrainState:
    params: list[LayerParams]
    embeddings: dict[str, Tensor]
    optimizer: AdamW
    seed: int = 0
    epoch: int = 0
    best_valid: float = -1.0
    best_epoch: int = -1
    bad_epochs: int = 0
    best_snapshot: dict[str, np.ndarray] | None = None
    config_text: str = ""
    meta: dict = field(default_factory=dict)

    def named_parameters(self):
        out = []
        for i, lp in enumerate(self.params):
            out.extend((f"layer{i}/{n}", t) for n, t in lp.named())
        out.extend((f"emb/{t}", e) for t, e in self.embeddings.items())
        return out

    def trainable(self):
        return [(n, t) for n, t in self.named_parameters() if t.requires_grad]

    def zero_grad(self):
        for _, t in self.named_parameters():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_parameters()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for n, t in self.named_parameters():
            t.data = snap[n].copy()


def ft_prepropagate(graph: HeteroGraph) -> dict[str, np.ndarray]:
    """Initial features for featureless types by mean propagation.

    Rounds proceed outward from the featured types: in each round every
    uncovered type averages the features of its in-neighbors over all
    relations whose source type is already covered. Nodes without such
    neighbors, and types never reached, get zeros.
    """
    if not graph.features:
        raise ValueError("feature propagation needs at least one featured node type")
    dims = {f.shape[1] for f in graph.features.values()}
    if len(dims) != 1:
        raise ValueError(f"featured types disagree on dimension: {sorted(dims)}")
    dim = dims.pop()
    known = {t: f.astype(np.float64) for t, f in graph.features.items()}
    result = {}
    while True:
        fresh = {}
        for t in graph.schema.node_types:
            if t in known:
                continue
            n = graph.node_counts[t]
            acc = np.zeros((n, dim))
            deg = np.zeros(n)
            used = False
            for ri, (src_t, _, dst_t) in enumerate(graph.schema.relations):
                if dst_t != t or src_t not in known:
                    continue
                used = True
                src, dst = graph.adjacency[ri].edges()
                np.add.at(acc, dst, known[src_t][src])
                deg += np.bincount(dst, minlength=n)
            if used:
                fresh[t] = acc / np.maximum(deg, 1)[:, None]
        if not fresh:
            break
        known.update(fresh)
        result.update(fresh)
    for t in graph.schema.node_types:
        if t not in known:
            result[t] = np.zeros((graph.node_counts[t], dim))
    return {t: v.astype(np.float32) for t, v in result.items()}


def init_embeddings(graph: HeteroGraph, dim: int, seed: int, ft: bool, trainable: bool,
                    dtype=np.float32) -> dict[str, Tensor]:
    featureless = [t for t in graph.schema.node_types if t not in graph.features]
    if ft:
        init = ft_prepropagate(graph)
    else:
        rng = np.random.default_rng([seed, 7])
        init = {t: rng.normal(size=(graph.node_counts[t], dim)) for t in featureless}
    return {t: Tensor(init[t].astype(dtype), requires_grad=trainable, name=f"emb/{t}")
            for t in featureless}


def init_state(graph: HeteroGraph, model_cfg: ModelConfig, cfg: TrainConfig,
               dtype=np.float32) -> TrainState:
    dim = model_cfg.in_dim
    for t, f in graph.features.items():
        if f.shape[1] != dim:
            raise ValueError(f"features of {t!r} are {f.shape[1]}-d, model expects {dim}")
    params = init_model_params(model_cfg, graph.schema, cfg.seed, dtype)
    emb = init_embeddings(graph, dim, cfg.seed, cfg.ft_enabled, cfg.feature_trainable, dtype)
    return TrainState(params, emb, AdamW(cfg.lr, cfg.weight_decay), seed=cfg.seed)


def gather_inputs(graph: HeteroGraph, state: TrainState, src_nodes: dict,
                  dtype=np.float32) -> dict[str, Tensor]:
    inputs = {}
    for t, ids in src_nodes.items():
        if len(ids) == 0:
            continue
        if t in graph.features:
            inputs[t] = Tensor(graph.features[t][ids].astype(dtype, copy=False))
        else:
            inputs[t] = T.select_rows(state.embeddings[t], ids)
    return inputs


# ------------------------------------------------------------------ steps


def _dtype(state: TrainState):
    return state.named_parameters()[0][1].dtype


def _batch_loss(graph, state, model_cfg, batch, target_type, dropout_key, delta=None):
    inputs = gather_inputs(graph, state, batch.hops[0].src_nodes, _dtype(state))
    if delta is not None:
        inputs = {t: T.add(x, delta[t]) for t, x in inputs.items()}
    out = model_forward(model_cfg, state.params, graph.schema, batch, inputs,
                        training=True, dropout_key=dropout_key)
    seeds = batch.seed_nodes[target_type]
    return T.cross_entropy(out[target_type], graph.labels[target_type][seeds])


def train_step(state: TrainState, graph: HeteroGraph, model_cfg: ModelConfig, batch,
               target_type: str, dropout_key=(0,)) -> float:
    """One plain optimizer step on a sampled batch; returns the batch loss."""
    state.zero_grad()
    with Tape() as tape:
        loss = _batch_loss(graph, state, model_cfg, batch, target_type, dropout_key)
        T.backward(tape, loss)
    state.optimizer.step(state.trainable())
    return loss.item()


def flag_perturb_train_step(state: TrainState, graph: HeteroGraph, model_cfg: ModelConfig,
                            batch, target_type: str, flag: FlagConfig, dropout_key=(0,),
                            rng: np.random.Generator | None = None) -> float:
    """FLAG: sign-gradient ascent on an input perturbation, descent on parameters.

    The perturbation starts uniform in [-a, a] on every input row of the
    batch. Each of the M forwards adds loss/M to the parameter gradients;
    between forwards the perturbation moves by a * sign(grad). One
    optimizer step follows. Returns the mean loss over the M forwards.
    """
    a = flag.step_size
    rng = rng or np.random.default_rng(0)
    dtype = _dtype(state)
    delta = {}
    for t, ids in batch.hops[0].src_nodes.items():
        if len(ids):
            d = model_cfg.in_dim
            delta[t] = Tensor(rng.uniform(-a, a, size=(len(ids), d)).astype(dtype),
                              requires_grad=True)
    state.zero_grad()
    total = 0.0
    inv = 1.0 / flag.steps
    for step in range(flag.steps):
        with Tape() as tape:
            loss = _batch_loss(graph, state, model_cfg, batch, target_type, dropout_key, delta)
            scaled = T.mul_scalar(loss, inv)
            T.backward(tape, scaled)
        total += scaled.item()
        if step < flag.steps - 1:
            for p in delta.values():
                p.data = (p.data + dtype.type(a) * np.sign(p.grad)).astype(dtype)
                p.grad = None
    state.optimizer.step(state.trainable())
    state.meta["last_delta"] = {t: p.data for t, p in delta.items()}
    return total


# ------------------------------------------------------------- evaluation


def predict_logits(state: TrainState, graph: HeteroGraph, model_cfg: ModelConfig,
                   node_type: str | None = None) -> np.ndarray:
    """Full-graph inference in eval mode."""
    node_type = node_type or graph.labeled_type()
    batch = full_batch(graph, len(model_cfg.layers))
    inputs = gather_inputs(graph, state, batch.hops[0].src_nodes, _dtype(state))
    out = model_forward(model_cfg, state.params, graph.schema, batch, inputs, training=False)
    return out[node_type].data


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise ValueError("accuracy of an empty split")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(state: TrainState, graph: HeteroGraph, model_cfg: ModelConfig, split: str,
             logits: np.ndarray | None = None) -> float:
    t = graph.labeled_type()
    nodes = graph.split_nodes(t, split)
    if len(nodes) == 0:
        raise ValueError(f"split {split!r} is empty")
    if logits is None:
        logits = predict_logits(state, graph, model_cfg, t)
    return accuracy(logits[nodes], graph.labels[t][nodes])


def fit(graph: HeteroGraph, model_cfg: ModelConfig, cfg: TrainConfig,
        state: TrainState | None = None, on_epoch=None):
    """Train with early stopping on validation accuracy.

    Returns ``(state, history)``; ``state`` holds the best-validation
    parameters. Pass a saved ``state`` to resume; ``on_epoch(state, record)``
    runs after every epoch, before the parameters are rolled back.
    """
    target = graph.labeled_type()
    train_nodes = graph.split_nodes(target, "train")
    if len(train_nodes) == 0:
        raise ValueError(f"no labelled training nodes of type {target!r}")
    if state is None:
        state = init_state(graph, model_cfg, cfg)
    history = list(state.meta.get("history", []))
    while state.epoch < cfg.max_epochs:
        epoch = state.epoch
        started = time.perf_counter()
        losses, weights = [], []
        batches = iter_batches(graph, target, train_nodes, cfg.batch_size, cfg.fanouts,
                               cfg.seed, epoch, shuffle=True, prefetch=cfg.prefetch)
        for bi, batch in enumerate(batches):
            key = (cfg.seed, epoch, bi)
            if cfg.flag is not None:
                rng = np.random.default_rng([cfg.seed, epoch, bi, 11])
                loss = flag_perturb_train_step(state, graph, model_cfg, batch, target, cfg.flag,
                                               key, rng)
            else:
                loss = train_step(state, graph, model_cfg, batch, target, key)
            losses.append(loss)
            weights.append(len(batch.seed_nodes[target]))
        logits = predict_logits(state, graph, model_cfg, target)
        valid = evaluate(state, graph, model_cfg, "valid", logits)
        test = evaluate(state, graph, model_cfg, "test", logits)
        wall = 0 if cfg.deterministic else int(round((time.perf_counter() - started) * 1000))
        record = {
            "epoch": epoch,
            "train_loss": float(np.average(losses, weights=weights)),
            "valid_acc": valid,
            "test_acc": test,
            "wall_ms": wall,
        }
        history.append(record)
        if valid > state.best_valid:
            state.best_valid = valid
            state.best_epoch = epoch
            state.best_snapshot = state.snapshot()
            state.bad_epochs = 0
        else:
            state.bad_epochs += 1
        state.epoch = epoch + 1
        state.meta["history"] = history
        log.debug("epoch %d loss %.4f valid %.4f test %.4f", epoch, record["train_loss"], valid, test)
        if on_epoch is not None:
            on_epoch(state, record)
        if state.bad_epochs >= cfg.patience:
            break
    if state.best_snapshot is not None:
        state.restore(state.best_snapshot)
    return state, history
