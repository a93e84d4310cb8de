import hashlib

import numpy as np
import pytest

from hetmp import tensor as T
from hetmp.data import PRESETS, generate_synthetic
from hetmp.graph import HeteroGraph, HeteroSchema, add_reverse_relations
from hetmp.gradcheck import tiny_graph
from hetmp.layers import build_model_config
from hetmp.sampling import sample_batch
from hetmp.tensor import Tensor
from hetmp.train import (AdamW, FlagConfig, TrainConfig, _batch_loss, accuracy, evaluate,
                         fit, flag_perturb_train_step, ft_prepropagate, init_state, train_step)


@pytest.fixture(scope="module")
def tiny():
    return add_reverse_relations(generate_synthetic(PRESETS["tiny"]()))


def _model(graph, **knobs):
    knobs = knobs or dict(sim_attn=True, sim=True, norm=True)
    return build_model_config(graph.feature_dim("paper"), graph.num_classes, 8, 2, **knobs)


def test_adamw_first_step_is_lr_times_sign():
    p = Tensor(np.array([[1.0, -2.0, 3.0]]), requires_grad=True)
    p.grad = np.array([[0.5, -4.0, 0.0]])
    AdamW(lr=0.1).step([("p", p)])
    np.testing.assert_allclose(p.data, [[0.9, -1.9, 3.0]], atol=1e-7)


def test_adamw_zero_gradient_is_pure_decay():
    p = Tensor(np.array([[2.0, -4.0]]), requires_grad=True)
    p.grad = np.zeros((1, 2))
    AdamW(lr=0.1, weight_decay=0.5).step([("p", p)])
    np.testing.assert_allclose(p.data, np.array([[2.0, -4.0]]) * (1 - 0.1 * 0.5))


def test_adamw_rejects_nan_in_checked_mode():
    p = Tensor(np.ones((1, 1)), requires_grad=True)
    p.grad = np.array([[np.nan]])
    T.set_checked(True)
    try:
        with pytest.raises(T.NonFiniteError):
            AdamW().step([("p", p)])
    finally:
        T.set_checked(False)


def test_ft_examples():
    s = HeteroSchema(["paper", "author", "inst"],
                     [("paper", "rev_writes", "author"), ("author", "affiliated", "inst")])
    g = HeteroGraph.from_edge_lists(
        s, {"paper": 2, "author": 2, "inst": 1}, [([0, 1], [0, 0]), ([0], [0])],
        features={"paper": np.array([[1.0, 0.0], [0.0, 1.0]], np.float32)})
    out = ft_prepropagate(g)
    np.testing.assert_array_equal(out["author"], [[0.5, 0.5], [0.0, 0.0]])
    np.testing.assert_array_equal(out["inst"], [[0.5, 0.5]])
    with pytest.raises(ValueError):
        ft_prepropagate(HeteroGraph.from_edge_lists(s, {"paper": 1, "author": 1, "inst": 1},
                                                    [([], []), ([], [])]))


def test_flag_single_step_zero_alpha_equals_plain_step(tiny):
    mc = _model(tiny)
    batch = sample_batch(tiny, {"paper": tiny.split_nodes("paper", "train")[:64]}, [5, 5], 0)
    a = init_state(tiny, mc, TrainConfig(seed=3, ft_enabled=True))
    b = init_state(tiny, mc, TrainConfig(seed=3, ft_enabled=True))
    la = train_step(a, tiny, mc, batch, "paper", (1,))
    lb = flag_perturb_train_step(b, tiny, mc, batch, "paper", FlagConfig(1, 0.0), (1,))
    assert la == lb
    for (_, x), (_, y) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(x.data, y.data)


def test_flag_perturbation_bound(tiny):
    mc = _model(tiny)
    batch = sample_batch(tiny, {"paper": tiny.split_nodes("paper", "train")[:64]}, [5, 5], 0)
    st = init_state(tiny, mc, TrainConfig(seed=0))
    flag = FlagConfig(3, 0.01)
    flag_perturb_train_step(st, tiny, mc, batch, "paper", flag, (0,), np.random.default_rng(0))
    for d in st.meta["last_delta"].values():
        assert np.abs(d).max() <= (flag.steps + 1) * flag.step_size + 1e-7


def test_flag_ascent_increases_loss(tiny):
    mc = _model(tiny)
    st, _ = fit(tiny, mc, TrainConfig(max_epochs=15, seed=0, ft_enabled=True, deterministic=True))
    batch = sample_batch(tiny, {"paper": tiny.split_nodes("paper", "train")}, [5, 5], 1)
    gaps = []
    for trial in range(20):
        clean = _batch_loss(tiny, st, mc, batch, "paper", (trial,)).item()
        snap = st.snapshot()
        opt = st.optimizer
        st.optimizer = AdamW(lr=0.0)
        flag_perturb_train_step(st, tiny, mc, batch, "paper", FlagConfig(3, 0.05), (trial,),
                                np.random.default_rng(trial))
        delta = {t: Tensor(v) for t, v in st.meta["last_delta"].items()}
        st.optimizer = opt
        st.restore(snap)
        adv = _batch_loss(tiny, st, mc, batch, "paper", (trial,), delta).item()
        gaps.append(adv - clean)
    assert np.mean(gaps) > 0


def test_small_step_decreases_loss(tiny):
    mc = _model(tiny)
    batch = sample_batch(tiny, {"paper": tiny.split_nodes("paper", "train")[:64]}, [5, 5], 0)
    for seed in range(10):
        st = init_state(tiny, mc, TrainConfig(seed=seed, lr=1e-4), dtype=np.float64)
        mc0 = build_model_config(mc.in_dim, mc.num_classes, 8, 2, sim_attn=True, sim=True,
                                 norm=True, dropout_p=0.0)
        before = _batch_loss(tiny, st, mc0, batch, "paper", (0,)).item()
        train_step(st, tiny, mc0, batch, "paper", (0,))
        after = _batch_loss(tiny, st, mc0, batch, "paper", (0,)).item()
        assert after < before


def _digest(state, prefix):
    h = hashlib.sha256()
    for name, t in state.named_parameters():
        if name.startswith(prefix):
            h.update(t.data.tobytes())
    return h.hexdigest()


@pytest.mark.parametrize("trainable", [True, False])
def test_embedding_tables_update_only_when_trainable(tiny, trainable):
    mc = _model(tiny)
    st = init_state(tiny, mc, TrainConfig(seed=0, ft_enabled=True, feature_trainable=trainable))
    before = _digest(st, "emb/")
    batch = sample_batch(tiny, {"paper": tiny.split_nodes("paper", "train")[:64]}, [5, 5], 0)
    train_step(st, tiny, mc, batch, "paper")
    assert (_digest(st, "emb/") != before) == trainable


def test_fit_stops_after_patience_with_frozen_lr(tiny):
    _, hist = fit(tiny, _model(tiny), TrainConfig(lr=0.0, patience=1, max_epochs=50, seed=0))
    assert len(hist) == 2


def test_fit_is_deterministic(tiny):
    cfg = TrainConfig(max_epochs=4, seed=5, flag=FlagConfig(2, 1e-3), ft_enabled=True, deterministic=True)
    _, h1 = fit(tiny, _model(tiny), cfg)
    _, h2 = fit(tiny, _model(tiny), cfg)
    assert h1 == h2
    assert all(r["wall_ms"] == 0 for r in h1)


def test_fit_restores_best_snapshot(tiny):
    mc = _model(tiny)
    st, hist = fit(tiny, mc, TrainConfig(max_epochs=8, seed=1, deterministic=True))
    best = max(hist, key=lambda r: r["valid_acc"])
    assert st.best_epoch == best["epoch"]
    assert evaluate(st, tiny, mc, "valid") == best["valid_acc"]


def test_fit_requires_training_nodes():
    g = tiny_graph()
    g.splits["paper"]["train"][:] = False
    with pytest.raises(ValueError):
        fit(g, _model(g), TrainConfig(max_epochs=1))


def test_accuracy_and_empty_split():
    assert accuracy(np.eye(3), np.arange(3)) == 1.0
    with pytest.raises(ValueError):
        accuracy(np.zeros((0, 3)), np.zeros(0, int))
    g = tiny_graph()
    g.splits["paper"]["test"][:] = False
    mc = _model(g)
    with pytest.raises(ValueError):
        evaluate(init_state(g, mc, TrainConfig()), g, mc, "test")


def test_random_predictor_is_at_chance():
    rng = np.random.default_rng(0)
    labels = np.arange(349).repeat(30)
    accs = [accuracy(rng.normal(size=(len(labels), 349)), labels) for _ in range(5)]
    assert abs(np.mean(accs) - 1 / 349) < 1e-3


def test_reported_accuracy_matches_dumped_logits(tiny):
    from hetmp.train import predict_logits

    mc = _model(tiny)
    st, _ = fit(tiny, mc, TrainConfig(max_epochs=3, seed=0))
    logits = predict_logits(st, tiny, mc)
    nodes = tiny.split_nodes("paper", "test")
    manual = np.mean(np.argmax(logits[nodes], 1) == tiny.labels["paper"][nodes])
    assert evaluate(st, tiny, mc, "test") == manual
