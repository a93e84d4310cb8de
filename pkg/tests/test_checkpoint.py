import struct

import numpy as np
import pytest

from hetmp.checkpoint import CheckpointError, checkpoint_load, checkpoint_save
from hetmp.data import PRESETS, generate_synthetic
from hetmp.graph import add_reverse_relations
from hetmp.layers import build_model_config
from hetmp.train import FlagConfig, TrainConfig, evaluate, fit, predict_logits


@pytest.fixture(scope="module")
def setup():
    g = add_reverse_relations(generate_synthetic(PRESETS["tiny"]()))
    mc = build_model_config(g.feature_dim("paper"), g.num_classes, 8, 2,
                            sim_attn=True, sim=True, norm=True)
    return g, mc


def _cfg(epochs):
    return TrainConfig(max_epochs=epochs, patience=100, seed=2, ft_enabled=True,
                       flag=FlagConfig(2, 1e-3), deterministic=True)


def test_round_trip_preserves_everything(setup, tmp_path):
    g, mc = setup
    st, _ = fit(g, mc, _cfg(3))
    st.config_text = "hidden = 8\n"
    checkpoint_save(st, tmp_path / "a.hgck")
    back = checkpoint_load(tmp_path / "a.hgck")
    np.testing.assert_array_equal(predict_logits(st, g, mc), predict_logits(back, g, mc))
    assert evaluate(st, g, mc, "test") == evaluate(back, g, mc, "test")
    for (na, a), (nb, b) in zip(st.named_parameters(), back.named_parameters()):
        assert na == nb and a.dtype == b.dtype and a.requires_grad == b.requires_grad
        np.testing.assert_array_equal(a.data, b.data)
    assert back.optimizer.t == st.optimizer.t
    for k in st.optimizer.m:
        np.testing.assert_array_equal(st.optimizer.m[k], back.optimizer.m[k])
        np.testing.assert_array_equal(st.optimizer.v[k], back.optimizer.v[k])
    assert (back.epoch, back.best_epoch, back.best_valid, back.bad_epochs) == \
        (st.epoch, st.best_epoch, st.best_valid, st.bad_epochs)
    assert back.config_text == st.config_text
    assert back.meta["history"] == st.meta["history"]
    checkpoint_save(back, tmp_path / "b.hgck")
    assert (tmp_path / "a.hgck").read_bytes() == (tmp_path / "b.hgck").read_bytes()


def test_resume_equals_uninterrupted(setup, tmp_path):
    g, mc = setup
    full, h_full = fit(g, mc, _cfg(5))
    part, _ = fit(g, mc, _cfg(2), on_epoch=lambda s, r: checkpoint_save(s, tmp_path / "mid.hgck"))
    resumed, h_res = fit(g, mc, _cfg(5), state=checkpoint_load(tmp_path / "mid.hgck"))
    assert h_res == h_full
    for (_, a), (_, b) in zip(full.named_parameters(), resumed.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_corruption_is_detected(setup, tmp_path):
    g, mc = setup
    st, _ = fit(g, mc, _cfg(1))
    path = tmp_path / "c.hgck"
    checkpoint_save(st, path)
    raw = path.read_bytes()
    cases = {
        "truncated": raw[: len(raw) // 2],
        "flipped": raw[:100] + bytes([raw[100] ^ 1]) + raw[101:],
        "magic": b"XXXX" + raw[4:],
        "version": raw[:4] + struct.pack("<I", 99) + raw[8:],
        "empty": b"",
    }
    for name, data in cases.items():
        bad = tmp_path / f"{name}.hgck"
        bad.write_bytes(data)
        with pytest.raises(CheckpointError):
            checkpoint_load(bad)
    (tmp_path / "version.hgck").write_bytes(raw[:4] + struct.pack("<I", 99) + raw[8:])
    with pytest.raises(CheckpointError, match="version"):
        checkpoint_load(tmp_path / "version.hgck")
