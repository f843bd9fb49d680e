import os

import numpy as np
import pytest

import scouter.xslot as xslot_mod
from scouter.backbone import BackboneConfig
from scouter.config import DataConfig, TrainConfig
from scouter.data import Dataset
from scouter.errors import CorruptionError, NonFiniteError, UpgradeError
from scouter.model import Classifier, ModelConfig
from scouter.tensor import Tensor
from scouter.trainer import (
    CHECKPOINT_MAGIC,
    LOG_COLUMNS,
    Adam,
    evaluate_accuracy,
    load_checkpoint,
    new_state,
    prepare_images,
    read_log,
    save_checkpoint,
    train,
    write_log,
)
from scouter.xslot import XSlotConfig


def toy_config(head="scouter", epochs=3, lam=1.0, e=1, seed=0, **train_kw):
    model = ModelConfig(head=head,
                        backbone=BackboneConfig(input_shape=(1, 8, 8), stage_channels=[4, 8], strides=[2, 1],
                                                blocks_per_stage=1),
                        xslot=XSlotConfig(n=2, channels=8, lam=lam, e=e))
    kw = dict(epochs=epochs, batch_size=5, learning_rate=1e-2, seed=seed)
    kw.update(train_kw)
    return TrainConfig(model=model, data=DataConfig(mean=[0.5], std=[0.5]), **kw)


def toy_data(n=20, seed=0):
    """Left-half bright for class 0, right-half bright for class 1."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    images = rng.uniform(0, 0.2, (n, 1, 8, 8)).astype(np.float32)
    for i, y in enumerate(labels):
        images[i, 0, :, 4 * y:4 * y + 4] += 0.7
    return Dataset(images, labels)


# ---------------------------------------------------------------- optimizer


def test_adam_matches_hand_formula(f64):
    w0 = np.array([0.5, -1.0, 2.0])
    grads = [np.array([0.1, -0.2, 0.3]), np.array([-0.5, 0.4, 0.0]), np.array([1.0, 1.0, -1.0])]
    p = Tensor(w0.copy(), requires_grad=True)
    opt = Adam({"p": p}, lr=0.01, weight_decay=0.1)
    m = v = np.zeros(3)
    w = w0.copy()
    for t, g in enumerate(grads, 1):
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * 0.1 * w
        w = w - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p.data, w, rtol=1e-12)


def test_adam_skips_params_without_grad():
    p = Tensor(np.ones(2), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    opt.step()
    np.testing.assert_array_equal(p.data, 1.0)


# ---------------------------------------------------------------- training


@pytest.mark.parametrize("head", ["scouter", "fc"])
def test_separable_toy_reaches_full_train_accuracy(head):
    cfg = toy_config(head=head, epochs=50)
    reached = []
    train(cfg, toy_data(), on_epoch=lambda rec, st: reached.append(rec.train_acc))
    assert max(reached) == 1.0


def test_log_records_every_epoch():
    state = train(toy_config(), toy_data(), toy_data(seed=1))
    assert [r.epoch for r in state.history] == [1, 2, 3]
    for r in state.history:
        assert np.isfinite(r.loss) and r.area > 0
        assert 0 <= r.train_acc <= 1 and 0 <= r.test_acc <= 1
    fc = train(toy_config(head="fc", epochs=1), toy_data())
    assert fc.history[0].area == 0.0 and np.isnan(fc.history[0].test_acc)


def test_same_seed_is_bitwise_identical():
    a = train(toy_config(), toy_data(), toy_data(seed=2))
    b = train(toy_config(), toy_data(), toy_data(seed=2))
    assert a.history[0].loss == b.history[0].loss
    assert [r.__dict__ for r in a.history] == [r.__dict__ for r in b.history]
    for k in a.model.params:
        np.testing.assert_array_equal(a.model.params[k].data, b.model.params[k].data)
    c = train(toy_config(seed=1), toy_data())
    assert c.history[0].loss != a.history[0].loss


def test_area_term_is_the_only_lambda_path(monkeypatch):
    real = xslot_mod.area_term
    # detach the attention inside the penalty so it contributes a constant to the loss
    monkeypatch.setattr(xslot_mod, "area_term", lambda attn, norm="sum": real(Tensor(attn.data), norm))
    a = train(toy_config(lam=0.0), toy_data())
    b = train(toy_config(lam=10.0), toy_data())
    for k in a.model.params:
        np.testing.assert_array_equal(a.model.params[k].data, b.model.params[k].data)
    assert [r.train_acc for r in a.history] == [r.train_acc for r in b.history]
    assert b.history[0].loss > a.history[0].loss


def test_lambda_changes_training_when_attached():
    a = train(toy_config(lam=0.0, epochs=1), toy_data())
    b = train(toy_config(lam=10.0, epochs=1), toy_data())
    assert not np.array_equal(a.model.params["xslot.q.0.weight"].data, b.model.params["xslot.q.0.weight"].data)


def test_nan_loss_aborts_with_position():
    data = toy_data()
    data.images[7, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteError, match=r"epoch 1, batch \d"):
        train(toy_config(), data)


def test_rejects_bad_inputs():
    with pytest.raises(ValueError):
        train(toy_config(), Dataset(np.zeros((0, 1, 8, 8)), np.zeros(0, int)))
    bad = toy_data()
    bad.labels[0] = 2
    with pytest.raises(ValueError):
        train(toy_config(), bad)


def test_resume_matches_uninterrupted_run(tmp_path):
    full = train(toy_config(epochs=4), toy_data(), toy_data(seed=2))
    part = train(toy_config(epochs=2), toy_data(), toy_data(seed=2))
    save_checkpoint(tmp_path / "c.ckpt", part)
    resumed = load_checkpoint(tmp_path / "c.ckpt")
    resumed = train(toy_config(epochs=4), toy_data(), toy_data(seed=2), state=resumed)
    assert [r.__dict__ for r in resumed.history] == [r.__dict__ for r in full.history]
    for k in full.model.params:
        np.testing.assert_array_equal(full.model.params[k].data, resumed.model.params[k].data)


# ---------------------------------------------------------------- accuracy


def test_accuracy_examples():
    cfg = toy_config()
    model = Classifier(cfg.model, seed=0)
    x = prepare_images(toy_data(200).images, cfg)
    pred = model.predict_logits(x).argmax(axis=1)
    assert evaluate_accuracy(model, x, pred) == 1.0
    assert evaluate_accuracy(model, x, 1 - pred) == 0.0


def test_random_predictor_is_chance_level():
    model = Classifier(ModelConfig(), seed=3)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1000, 1, 28, 28)).astype(np.float32)
    labels = rng.integers(0, 10, 1000)
    assert abs(evaluate_accuracy(model, x, labels) - 0.1) < 0.04


def test_negative_polarity_uses_same_argmax():
    cfg = toy_config(e=-1)
    model = Classifier(cfg.model, seed=0)
    x = prepare_images(toy_data().images, cfg)
    logits = model.predict_logits(x)
    assert np.all(logits <= 0)
    labels = toy_data().labels
    assert evaluate_accuracy(model, x, labels) == np.mean(logits.argmax(axis=1) == labels)


# ---------------------------------------------------------------- checkpoints and logs


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    state = train(toy_config(), toy_data())
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, state)
    loaded = load_checkpoint(path)
    x = prepare_images(toy_data().images, state.config)
    a, b = state.model.forward(x), loaded.model.forward(x)
    np.testing.assert_array_equal(a.logits.data, b.logits.data)
    np.testing.assert_array_equal(a.xslot.attention.data, b.xslot.attention.data)
    assert loaded.config == state.config
    assert loaded.epoch == 3 and loaded.optimizer.step_count == state.optimizer.step_count
    for k in state.model.params:
        np.testing.assert_array_equal(loaded.optimizer.m[k], state.optimizer.m[k])
        np.testing.assert_array_equal(loaded.optimizer.v[k], state.optimizer.v[k])
    assert path.read_bytes().startswith(CHECKPOINT_MAGIC)


def test_corrupted_tail_byte(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, new_state(toy_config()))
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptionError):
        load_checkpoint(path)


@pytest.mark.parametrize("keep", [0.1, 0.5, 0.99])
def test_truncated_file(tmp_path, keep):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, new_state(toy_config()))
    raw = path.read_bytes()
    path.write_bytes(raw[: int(len(raw) * keep)])
    with pytest.raises(CorruptionError):
        load_checkpoint(path)


def test_version_mismatch_is_upgrade_error(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, new_state(toy_config()))
    raw = bytearray(path.read_bytes())
    raw[len(CHECKPOINT_MAGIC):len(CHECKPOINT_MAGIC) + 4] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(UpgradeError, match="99"):
        load_checkpoint(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CorruptionError):
        load_checkpoint(path)


def test_desk_checkpoint_size_accounting(tmp_path):
    state = new_state(TrainConfig())
    path = tmp_path / "desk.ckpt"
    save_checkpoint(path, state)
    n_params = state.model.parameter_count()
    n_buffers = sum(b.size for b in state.model.buffers.values())
    # weights plus the two Adam moment buffers, all float32, plus a small header
    payload = 4 * (3 * n_params + n_buffers)
    overhead = os.path.getsize(path) - payload
    assert 0 < overhead < 16384


def test_log_round_trip(tmp_path):
    state = train(toy_config(epochs=2), toy_data(), toy_data(seed=3))
    path = tmp_path / "log.csv"
    write_log(path, state.history)
    assert path.read_text().splitlines()[0] == ",".join(LOG_COLUMNS)
    assert read_log(path) == state.history
