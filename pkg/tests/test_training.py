import math

import numpy as np
import pytest

from sigmma import numcore as nc
from sigmma.datagen import GenConfig, generate_dataset
from sigmma.training import (
    TrainConfig, TrainState, TrainingDiverged, load_checkpoint, read_checkpoint,
    read_metrics_log, save_checkpoint, train, train_batches,
)

SMALL = dict(d=8, d_h=8, d_score=4, r=8, batch_size=4)


@pytest.fixture(scope="module")
def ds():
    return generate_dataset(GenConfig(H=256, W=256, n_genes=50, cells_min=10, cells_max=25), 3)


def params_of(state):
    return {k: p.data.copy() for k, p in state.model.parameters().items()}


def test_zero_lr_params_fixed_and_loss_constant(ds):
    cfg = TrainConfig(epochs=3, lr=0.0, tau_g_start=0.3, tau_g_end=0.3, **SMALL)
    state = TrainState.fresh(ds, cfg)
    before = params_of(state)
    state = train(ds, cfg, state)
    for k, v in params_of(state).items():
        np.testing.assert_array_equal(v, before[k])
    assert all(math.isfinite(r["L_total"]) for r in state.history)


def test_zero_lr_infer_loss_constant(ds):
    cfg = TrainConfig(epochs=2, lr=0.0, **SMALL)
    state = TrainState.fresh(ds, cfg)
    tiles = ds.tiles_in("train")[:4]
    a = state.model.batch_loss(tiles, None, "infer")[0].item()
    state = train(ds, cfg, state)
    b = state.model.batch_loss(tiles, None, "infer")[0].item()
    assert a == b


def test_same_seed_identical(ds):
    cfg = TrainConfig(epochs=3, **SMALL)
    a, b = train(ds, cfg), train(ds, cfg)
    for k, v in params_of(a).items():
        np.testing.assert_array_equal(v, params_of(b)[k])
    assert [r["L_total"] for r in a.history] == [r["L_total"] for r in b.history]


def test_different_seed_differs(ds):
    a = train(ds, TrainConfig(epochs=1, seed=0, **SMALL))
    b = train(ds, TrainConfig(epochs=1, seed=1, **SMALL))
    assert a.history[0]["L_total"] != b.history[0]["L_total"]


def test_resume_equivalence(ds, tmp_path):
    cfg = TrainConfig(epochs=10, **SMALL)
    straight = train(ds, cfg)
    ck = tmp_path / "half.sigc"
    train(ds, cfg, until_epoch=5, checkpoint_path=ck)
    resumed = train(ds, cfg, load_checkpoint(ck, ds))
    for k, v in params_of(straight).items():
        np.testing.assert_array_equal(v, params_of(resumed)[k])
    assert [r["L_total"] for r in straight.history] == [r["L_total"] for r in resumed.history]


def test_checkpoint_round_trip(ds, tmp_path):
    cfg = TrainConfig(epochs=2, **SMALL)
    state = train(ds, cfg)
    path = tmp_path / "c.sigc"
    save_checkpoint(state, path)
    assert path.read_bytes()[:4] == b"SIGC"
    back = load_checkpoint(path, ds)
    assert back.epoch == 2 and back.model.cfg == cfg
    for k, v in params_of(state).items():
        np.testing.assert_array_equal(v, params_of(back)[k])
        np.testing.assert_array_equal(state.optimizer.m[k], back.optimizer.m[k])
    assert back.optimizer.t == state.optimizer.t
    save_checkpoint(back, tmp_path / "d.sigc")
    assert path.read_bytes() == (tmp_path / "d.sigc").read_bytes()


def test_checkpoint_rejects_bad_magic(tmp_path, ds):
    p = tmp_path / "x.sigc"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(p, ds)


def test_checkpoint_rejects_gene_mismatch(ds, tmp_path):
    state = train(ds, TrainConfig(epochs=1, **SMALL))
    save_checkpoint(state, tmp_path / "c.sigc")
    other = generate_dataset(GenConfig(H=256, W=256, n_genes=55, cells_min=10, cells_max=25), 3)
    with pytest.raises(ValueError, match="genes"):
        load_checkpoint(tmp_path / "c.sigc", other)


def test_metrics_log(ds, tmp_path):
    cfg = TrainConfig(epochs=3, **SMALL)
    state = train(ds, cfg, log_path=tmp_path / "m.csv")
    rows = read_metrics_log(tmp_path / "m.csv")
    assert [r["epoch"] for r in rows] == [1, 2, 3]
    for r, h in zip(rows, state.history):
        assert r["L_total"] == h["L_total"]
        assert r["L_total"] == pytest.approx(r["L_micro"] + r["L_meso"] + r["L_macro"], abs=1e-12)


def test_train_batches_drop_singletons():
    rng = nc.Rng([0, 0])
    batches = train_batches(9, 4, rng)
    assert [len(b) for b in batches] == [4, 4]
    assert len(set(np.concatenate(batches))) == 8


def test_tau_g_schedule():
    cfg = TrainConfig(epochs=5)
    assert cfg.tau_g(0) == 0.5
    assert cfg.tau_g(4) == pytest.approx(0.1)
    assert cfg.tau_g(2) == pytest.approx(0.3)


def test_single_scale_total_is_macro(ds):
    state = train(ds, TrainConfig(epochs=1, single_scale=True, **SMALL))
    h = state.history[0]
    assert h["L_total"] == h["L_macro"]


@pytest.mark.parametrize("flags", [dict(no_graph=True), dict(no_sparsification=True),
                                   dict(no_graph=True, single_scale=True), dict(learn_tau=True)])
def test_variants_train(ds, flags):
    state = train(ds, TrainConfig(epochs=2, **SMALL, **flags))
    assert all(math.isfinite(r["L_total"]) for r in state.history)


def test_loss_decreases():
    ds64 = generate_dataset(GenConfig(H=512, W=512, n_genes=50, cells_min=10, cells_max=30), 5)
    cfg = TrainConfig(epochs=40, d=16, d_h=16, d_score=8, r=16)
    hist = [r["L_total"] for r in train(ds64, cfg).history]
    assert np.mean(hist[-5:]) < np.mean(hist[:5]) - 0.5


def test_divergence_restores_last_good(ds, tmp_path, monkeypatch):
    cfg = TrainConfig(epochs=5, **SMALL)
    good = train(ds, cfg, until_epoch=2)
    snap = params_of(good)
    from sigmma.training import SigmmaModel
    real = SigmmaModel.batch_loss

    def poisoned(self, *a, **k):
        loss, parts = real(self, *a, **k)
        return loss * nc.tensor(float("nan")), parts

    monkeypatch.setattr(SigmmaModel, "batch_loss", poisoned)
    ck = tmp_path / "div.sigc"
    with pytest.raises(TrainingDiverged) as info:
        train(ds, cfg, good, checkpoint_path=ck)
    state = info.value.state
    assert state.epoch == 2
    for k, v in params_of(state).items():
        np.testing.assert_array_equal(v, snap[k])
    _, meta, _ = read_checkpoint(ck)
    assert len(meta["history"]) == 2


def test_empty_train_split_raises():
    ds = generate_dataset(GenConfig(H=64, W=64, n_genes=50, cells_min=5, cells_max=8,
                                    split=(0.0, 0.0, 1.0)), 1)
    with pytest.raises(ValueError, match="empty"):
        train(ds, TrainConfig(epochs=1, **SMALL))
