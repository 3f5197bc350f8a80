import math

import numpy as np
import pytest

from conftest import toy_event
from hpst.errors import ConfigMismatch, CorruptCheckpoint, NonFiniteLoss, ShapeMismatch
from hpst.events import write_events
from hpst.model import HyperParams, init_weights
from hpst.synthgen import GenConfig, generate_dataset, generate_events
from hpst.trainer import (
    OptimizerState,
    TrainConfig,
    adam_step,
    evaluate_events,
    event_gradients,
    fit_events,
    is_validation,
    load_checkpoint,
    save_checkpoint,
    train,
)


def scalar_adam(g_seq, w, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(g_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return w


def test_adam_zero_gradient():
    w = {"a": np.arange(3.0)}
    state = OptimizerState.zeros_like(w)
    new, state = adam_step(w, {"a": np.zeros(3)}, state, 1e-3)
    np.testing.assert_array_equal(new["a"], w["a"])
    assert state.step == 1


def test_adam_first_step_is_lr():
    w = {"a": np.zeros(4)}
    new, _ = adam_step(w, {"a": np.array([0.5, -2.0, 7.0, -1e-3])}, OptimizerState.zeros_like(w), 1e-3)
    np.testing.assert_allclose(new["a"], [-1e-3, 1e-3, -1e-3, 1e-3], rtol=1e-4)


def test_adam_three_step_scalar_oracle():
    gs = [0.3, -1.2, 0.05]
    w = {"x": np.array(1.5)}
    state = OptimizerState.zeros_like(w)
    for g in gs:
        w, state = adam_step(w, {"x": np.array(g)}, state, 0.01)
    assert float(w["x"]) == pytest.approx(scalar_adam(gs, 1.5, 0.01), rel=1e-14)
    assert state.step == 3


def test_adam_leaves_inputs_untouched():
    w = {"a": np.ones(2)}
    state = OptimizerState.zeros_like(w)
    adam_step(w, {"a": np.ones(2)}, state, 0.1)
    np.testing.assert_array_equal(w["a"], 1.0)
    np.testing.assert_array_equal(state.m["a"], 0.0)


def test_adam_shape_mismatch():
    w = {"a": np.ones(2)}
    with pytest.raises(ShapeMismatch):
        adam_step(w, {"a": np.ones(3)}, OptimizerState.zeros_like(w), 0.1)


@pytest.mark.parametrize("bad", [dict(epochs=0), dict(lr=0.0), dict(lam=1.5), dict(batch_size=0)])
def test_config_preconditions(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_validation_split_is_about_ten_percent():
    frac = np.mean([is_validation(i) for i in range(20_000)])
    assert 0.09 < frac < 0.11
    assert is_validation(123) == is_validation(123)


def test_every_parameter_changes_after_one_step():
    hyper = HyperParams()
    w = init_weights(hyper, 0)
    _, grads = event_gradients(toy_event(), w, hyper, 0.5)
    new, _ = adam_step(w, grads, OptimizerState.zeros_like(w), 1e-3)
    unchanged = [k for k in w if np.array_equal(new[k], w[k].data)]
    assert unchanged == []


def test_non_finite_loss_reports_event():
    hyper = HyperParams(base_dim=4, k_nn=2)
    w = init_weights(hyper, 0)
    w["embed/weight"].data = np.full_like(w["embed/weight"].data, np.nan)
    ev = toy_event()
    with pytest.raises(NonFiniteLoss) as info:
        event_gradients(ev, w, hyper, 0.5)
    assert info.value.event_id == ev.event_id


def test_smoke_loss_decreases():
    events = generate_events(20, GenConfig(seed=21))
    drops = 0
    for seed in range(3):
        h = fit_events(events, TrainConfig(epochs=2, seed=seed), val_events=[]).history
        drops += h[1]["train_loss_total"] < h[0]["train_loss_total"]
    assert drops >= 1


def test_overfit_single_event():
    ev = generate_events(1, GenConfig(seed=0))
    hyper = HyperParams()
    res = fit_events(ev, TrainConfig(epochs=200, batch_size=1, hyper=hyper), val_events=[])
    assert evaluate_events(ev, res.weights, hyper, 0.5)["loss_total"] < 0.05


def test_best_epoch_tracks_validation(tmp_path):
    events = generate_events(30, GenConfig(seed=22))
    log = []
    res = fit_events(events, TrainConfig(epochs=3, hyper=HyperParams(base_dim=8)), log.append)
    assert len(res.history) == 3 == len(log)
    aucs = [row["val_macro_auc"] for row in res.history]
    assert res.best_epoch == 1 + int(np.argmax(aucs))


def test_patience_stops_early():
    events = generate_events(30, GenConfig(seed=23))
    res = fit_events(events, TrainConfig(epochs=50, lr=1.0, patience=1, hyper=HyperParams(base_dim=4)))
    assert len(res.history) < 50


def test_train_deterministic_bytes(tmp_path):
    data = tmp_path / "d.jsonl"
    generate_dataset(12, GenConfig(seed=24), data)
    cfg = TrainConfig(epochs=2, hyper=HyperParams(base_dim=8))
    a = train(data, cfg, tmp_path / "a.ckpt")
    b = train(data, cfg, tmp_path / "b.ckpt")
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.ckpt.log.jsonl").read_bytes() == (tmp_path / "b.ckpt.log.jsonl").read_bytes()
    assert len((tmp_path / "a.ckpt.log.jsonl").read_text().splitlines()) == 2


def test_train_rejects_incompatible_dataset(tmp_path):
    data = tmp_path / "d.jsonl"
    write_events([toy_event()], data, n_classes=6, p_max=8)
    with pytest.raises(ConfigMismatch):
        train(data, TrainConfig(hyper=HyperParams(instance_slots=4)), tmp_path / "x.ckpt")


# --- checkpoints ------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    hyper = HyperParams(base_dim=8, k_nn=4)
    w = init_weights(hyper, 7)
    path = tmp_path / "w.ckpt"
    save_checkpoint(w, hyper, path)
    w2, h2 = load_checkpoint(path, hyper)
    assert h2 == hyper
    assert list(w2) == list(w)
    for k in w:
        assert w2[k].data.tobytes() == w[k].data.tobytes()
    assert path.read_bytes()[:4] == b"HPST"


@pytest.mark.parametrize("cut", [3, 10, 100, -1])
def test_checkpoint_truncated(tmp_path, cut):
    hyper = HyperParams(base_dim=4)
    path = tmp_path / "w.ckpt"
    save_checkpoint(init_weights(hyper, 0), hyper, path)
    path.write_bytes(path.read_bytes()[:cut])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "w.ckpt"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)


def test_checkpoint_shape_mismatch(tmp_path):
    hyper = HyperParams(base_dim=4)
    w = init_weights(hyper, 0)
    w["embed/weight"].data = np.zeros((3, 3))
    path = tmp_path / "w.ckpt"
    save_checkpoint(w, hyper, path)
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)


def test_checkpoint_config_mismatch(tmp_path):
    a, b = HyperParams(base_dim=4), HyperParams(base_dim=8)
    path = tmp_path / "w.ckpt"
    save_checkpoint(init_weights(a, 0), a, path)
    with pytest.raises(ConfigMismatch):
        load_checkpoint(path, b)
