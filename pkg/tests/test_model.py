import math
import time

import numpy as np
import pytest

from helpers import PROBE, gradient_check, probe_batch
from midiseg import model as M
from midiseg.model import (AdamWState, BoundaryNet, ConvSpec, ModelConfig, PatchSet, TrainConfig, adamw_step,
                           ensemble_predict, init_model, load_checkpoint, save_checkpoint, train)

TINY = ModelConfig(conv=(ConvSpec(4, stride=2), ConvSpec(4)), pool=(2, 2), hidden=4,
                   input_shape=(3, 16, 32), seed=1)


def test_gradient_check():
    start = time.perf_counter()
    errors = gradient_check()
    assert len(errors) >= 8
    assert {name for name, _ in errors} == set(BoundaryNet(PROBE).params)
    assert max(e for _, e in errors) < 1e-3, errors
    assert time.perf_counter() - start < 10


def test_loss_is_mean_bce():
    net = BoundaryNet(PROBE)
    x, y = probe_batch()
    loss, _ = net.loss_and_grads(x, y)
    p = net.predict_proba(x)
    assert loss == pytest.approx(float(np.mean(M.bce_loss(p, y))), rel=1e-12)


def test_bce_clamps():
    assert M.bce_loss(0.0, 1.0) == pytest.approx(-math.log(1e-7))
    assert M.bce_loss(1.0, 0.0) == pytest.approx(-math.log(1e-7), rel=1e-6)
    assert np.isfinite(M.sigmoid(np.array([-1000.0, 1000.0]))).all()


def adam_reference(p, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh, vh = m / (1 - b1 ** t), v / (1 - b2 ** t)
        p = p - lr * (mh / (math.sqrt(vh) + eps) + wd * p)
        out.append(p)
    return out


def test_adamw_matches_scalar_reference():
    params = {"w.weight": np.array([0.5])}
    state = AdamWState()
    gs = [0.3, -0.1, 0.7]
    expected = adam_reference(0.5, gs, 1e-2, 0.1)
    for g, e in zip(gs, expected):
        adamw_step(params, {"w.weight": np.array([g])}, state, 1e-2, 0.1)
        assert abs(params["w.weight"][0] - e) < 1e-12


def test_adamw_hand_values():
    # first step moves by lr * (sign(g) + wd * p) up to eps
    params = {"w.weight": np.array([1.0])}
    adamw_step(params, {"w.weight": np.array([2.0])}, AdamWState(), 0.1, 0.5, eps=0.0)
    assert params["w.weight"][0] == pytest.approx(1.0 - 0.1 * (1 + 0.5), abs=1e-15)


def test_adamw_pure_decay_and_bias_exemption():
    params = {"a.weight": np.array([2.0]), "a.bias": np.array([2.0])}
    zero = {k: np.zeros(1) for k in params}
    state = AdamWState()
    for t in range(1, 4):
        adamw_step(params, zero, state, 1e-2, 0.5)
        assert abs(params["a.weight"][0] - 2.0 * (1 - 0.5e-2) ** t) < 1e-12
    assert params["a.bias"][0] == 2.0


def test_adamw_shape_mismatch():
    with pytest.raises(M.ShapeMismatch):
        adamw_step({"w.weight": np.zeros(2)}, {"w.weight": np.zeros(3)}, AdamWState(), 1e-3, 0)


def test_epoch_duplicates_positives():
    labels = np.array([True, False, False, True, False])
    idx = M.epoch_indices(labels, 2, np.random.default_rng(0))
    assert sorted(idx.tolist()) == [0, 0, 1, 2, 3, 3, 4]


def tiny_set(n=8, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2 == 0
    return PatchSet(rng.random((n,) + TINY.input_shape).astype(np.float32), y)


def scripted_run(scores, patience=5):
    data = tiny_set()
    snapshots = {}

    def scorer(m, epoch):
        snapshots[epoch] = {k: v.copy() for k, v in m.params.items()}
        return scores[epoch - 1]

    tc = TrainConfig(max_epochs=len(scores), patience=patience, batch_size=4)
    return train(data, data, TINY, tc, val_scorer=scorer), snapshots


def test_early_stopping_on_plateau():
    scores = [0.1, 0.3, 0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6] + [0.9] * 10
    model, snaps = scripted_run(scores)
    assert model.best_epoch == 4
    assert len(model.history) == 9
    for k, v in model.params.items():
        np.testing.assert_array_equal(v, snaps[4][k])
    assert not all(np.array_equal(model.params[k], snaps[9][k]) for k in model.params)


def test_early_stopping_after_decline():
    model, _ = scripted_run([0.5, 0.7, 0.4, 0.4, 0.3, 0.2, 0.1, 0.9, 0.9])
    assert model.best_epoch == 2 and len(model.history) == 7


def test_history_fields():
    model, _ = scripted_run([0.1, 0.2])
    assert list(model.history[0]) == ["epoch", "samples", "train_loss", "val_f1"]
    assert model.history[0]["samples"] == 12  # 4 positives twice, 4 negatives once


def test_degenerate_training_sets():
    data = tiny_set()
    with pytest.raises(M.DegenerateDataset):
        train(PatchSet(data.x, np.ones(len(data), bool)), data, TINY)
    with pytest.raises(M.DegenerateDataset):
        train(data, PatchSet(data.x[:0], data.y[:0]), TINY)


def test_input_shape_checked():
    net = BoundaryNet(TINY)
    with pytest.raises(M.ShapeMismatch):
        net.predict_proba(np.zeros((1, 3, 16, 30)))


def test_forward_backward_single_patch():
    m = init_model(PROBE)
    x, _ = probe_batch(n=1)
    p = M.forward(m, x[0])
    assert 0 < p < 1
    grads = M.backward(m, x[0], 1)
    assert set(grads) == set(m.params)


def test_ensemble_is_mean():
    a, b = init_model(TINY), init_model(ModelConfig(**{**TINY.__dict__, "seed": 2}))
    x = tiny_set().x
    np.testing.assert_allclose(ensemble_predict([a, b], x),
                               (a.predict_proba(x) + b.predict_proba(x)) / 2, rtol=1e-12)
    np.testing.assert_array_equal(ensemble_predict([a], x), a.predict_proba(x))
    with pytest.raises(M.EmptyEnsemble):
        ensemble_predict([], x)


def test_checkpoint_round_trip(tmp_path):
    model, _ = scripted_run([0.2, 0.4])
    save_checkpoint(model, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.config == model.config and back.best_epoch == model.best_epoch
    assert back.history == model.history
    for k in model.params:
        np.testing.assert_array_equal(back.params[k], model.params[k])
    x = tiny_set().x
    np.testing.assert_array_equal(back.predict_proba(x), model.predict_proba(x))


def test_checkpoint_rejects_other_files(tmp_path):
    (tmp_path / "x").write_bytes(b"not a model")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x")


def test_default_model_shape():
    net = BoundaryNet()
    x = np.zeros((2, 3, 128, 512), dtype=np.float32)
    assert net.predict_proba(x).shape == (2,)
