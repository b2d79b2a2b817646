import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from terracost import patchex as px
from terracost.errors import EmptyBatch, EmptyDataset, FormatError, ShapeMismatch
from terracost.regnet import Model, ModelSpec, TrainConfig, backward, forward, load_model, nrmse_loss, save_model, train
from terracost.regnet.gradcheck import gradient_check
from terracost.regnet.model import nrmse_grad
from terracost.regnet.nn import Dense
from terracost.rng import SplitMix64

TINY = ModelSpec(input_side=8, stem_channels=4, stem_stride=1, channels_per_stage=(4, 8))
vals = st.floats(0.1, 200.0)


def planes(n, side=8, seed=0):
    return SplitMix64(seed).random(n * 3 * side * side).reshape(n, 3, side, side).astype(np.float32)


def toy_dataset(n=64, side=8, seed=0, const=False):
    x = planes(n, side, seed)
    if const:
        w = np.full(n, 80.0)
        v = np.full(n, 0.9)
    else:
        w = 40.0 + 60.0 * x[:, 2].mean(axis=(1, 2))
        v = 0.4 + 0.5 * x[:, 0].mean(axis=(1, 2))
    split = np.where(np.arange(n) % 5 == 0, int(px.Split.TEST), int(px.Split.TRAIN))
    return px.Dataset(x, w, v, np.full(n, 6), np.zeros(n), split, float(w.max()), float(v.max()))


# -- loss --------------------------------------------------------------------------------------


def test_loss_examples():
    assert nrmse_loss([100.0], [1.0], [100.0], [1.0], 100.0, 1.0)[0] == 0.0
    assert nrmse_loss([110.0], [1.0], [100.0], [1.0], 100.0, 1.0)[0] == pytest.approx(1.0)
    with pytest.raises(EmptyBatch):
        nrmse_loss([], [], [], [], 1.0, 1.0)
    with pytest.raises(ShapeMismatch):
        nrmse_loss([1.0], [1.0, 2.0], [1.0], [1.0], 1.0, 1.0)


@given(vals, vals, vals, vals, st.floats(1.0, 300.0), st.floats(0.5, 2.0))
def test_loss_non_negative_and_homogeneous(wh, vh, ws, vs, mw, mv):
    one = nrmse_loss([wh], [vh], [ws], [vs], mw, mv)[0]
    assert one >= 0.0
    assert (one == 0.0) == (wh == ws and vh == vs)
    two = nrmse_loss([ws + 2 * (wh - ws)], [vs + 2 * (vh - vs)], [ws], [vs], mw, mv)[0]
    assert two == pytest.approx(2 * one, rel=1e-9, abs=1e-12)


def test_gradient_is_zero_at_zero_radicand():
    g = nrmse_grad(np.array([5.0]), np.array([1.0]), np.array([5.0]), np.array([1.0]), 10.0, 1.0)
    assert np.array_equal(g, np.zeros((1, 2)))


def test_dense_bias_gradient_by_hand():
    # head outputs are the bias when weights are zero; with max_w = 100, max_v = 1,
    # w_hat = 50, v_hat = 0.8 against (40, 1): L = sqrt(10^2/100 + 0.2^2) = sqrt(1.04),
    # dL/db_w = max_w * (ew / max_w) / L = 10 / sqrt(1.04), dL/db_v = -0.2 / sqrt(1.04)
    layer = Dense("head", 3, 2)
    params = {}
    layer.init(params, SplitMix64(0))
    params["head.weight"].value[:] = 0.0
    params["head.bias"].value[:] = [0.5, 0.8]
    out = layer.forward(params, np.ones((1, 3)), train=True)
    g = nrmse_grad(out[:, 0] * 100.0, out[:, 1] * 1.0, np.array([40.0]), np.array([1.0]), 100.0, 1.0)
    layer.backward(params, g)
    expected = [10.0 / math.sqrt(1.04), -0.2 / math.sqrt(1.04)]
    assert params["head.bias"].grad == pytest.approx(expected, abs=1e-9)


def test_gradient_check_small_model():
    model = Model.initialise(TINY, 100.0, 1.0, seed=3, dtype=np.float64)
    assert model.num_parameters() <= 5000
    x = planes(4, seed=1)
    worst, per = gradient_check(model, x, np.array([40.0, 60.0, 80.0, 55.0]), np.array([0.5, 0.7, 0.9, 0.6]))
    assert worst <= 1e-3, per


# -- forward -----------------------------------------------------------------------------------


def test_zero_weights_give_zero_output():
    model = Model.initialise(TINY, 100.0, 1.0)
    for t in model.trainable.values():
        t.value[:] = 0.0
    w, v = model.predict(planes(3))
    assert np.all(w == 0.0) and np.all(v == 0.0)


def test_identical_patches_and_batch_independence():
    model = Model.initialise(TINY, 100.0, 1.0, seed=2)
    x = planes(5, seed=4)
    same = np.repeat(x[:1], 4, axis=0)
    w, v = model.predict(same)
    assert np.all(w == w[0]) and np.all(v == v[0])
    alone = model.predict(x[2:3])
    batch = model.predict(x)
    assert alone[0][0] == pytest.approx(batch[0][2], abs=1e-6)
    assert alone[1][0] == pytest.approx(batch[1][2], abs=1e-6)


@given(st.floats(0.1, 10.0))
def test_head_is_linear(k):
    model = Model.initialise(TINY, 100.0, 1.0, seed=5, dtype=np.float64)
    x = planes(3, seed=6)
    model.weights["head.bias"].value[:] = [0.3, -0.2]
    base = model.forward_normalized(x)
    model.weights["head.weight"].value *= k
    model.weights["head.bias"].value *= k
    assert np.allclose(model.forward_normalized(x), k * base, rtol=1e-9, atol=1e-12)


def test_forward_accepts_patch_list_and_checks_shape():
    model = Model.initialise(TINY, 100.0, 1.0)
    x = planes(2)
    assert np.array_equal(forward(model, list(x))[0], model.predict(x)[0])
    with pytest.raises(ShapeMismatch):
        model.predict(planes(2, side=9))


def test_backward_returns_every_trainable_tensor():
    model = Model.initialise(TINY, 100.0, 1.0)
    grads = backward(model, planes(4), (np.full(4, 50.0), np.full(4, 0.5)))
    assert set(grads) == set(model.trainable)
    assert all(np.all(np.isfinite(g)) for g in grads.values())


# -- training ----------------------------------------------------------------------------------


def test_training_is_deterministic():
    ds = toy_dataset()
    cfg = TrainConfig(epochs=2, batch_size=16, learning_rate=1e-3)
    a = train(ds, TINY, cfg)
    b = train(ds, TINY, cfg)
    assert all(np.array_equal(a.weights[k].value, b.weights[k].value) for k in a.weights)


def test_zero_learning_rate_leaves_weights():
    ds = toy_dataset()
    init = Model.initialise(TINY, ds.max_w, ds.max_v, seed=0)
    m = train(ds, TINY, TrainConfig(epochs=2, batch_size=16, learning_rate=0.0), init=init)
    for k, t in m.trainable.items():
        assert np.array_equal(t.value, init.weights[k].value)


def test_constant_labels_are_learned():
    ds = toy_dataset(n=640, const=True)
    m = train(ds, TINY, TrainConfig(epochs=20, batch_size=16, learning_rate=3e-3))
    idx = ds.indices(px.Split.TEST)
    w, v = m.predict(ds.planes[idx])
    assert np.mean(np.abs(w - 80.0) / 80.0) <= 0.01
    assert np.mean(np.abs(v - 0.9) / 0.9) <= 0.01


def test_empty_training_split_raises():
    ds = toy_dataset()
    with pytest.raises(EmptyDataset):
        train(ds, TINY, TrainConfig(epochs=1), train_idx=np.array([], dtype=int))


def test_history_is_recorded():
    m = train(toy_dataset(), TINY, TrainConfig(epochs=3, batch_size=16, learning_rate=1e-3))
    hist = m.meta["history"]
    assert [h["epoch"] for h in hist] == [0, 1, 2]
    assert hist[-1]["train_loss"] < hist[0]["train_loss"]


# -- persistence -------------------------------------------------------------------------------


def test_model_round_trip(tmp_path):
    m = train(toy_dataset(), TINY, TrainConfig(epochs=1, batch_size=16))
    save_model(m, tmp_path / "m.tcnn")
    back = load_model(tmp_path / "m.tcnn")
    x = planes(3, seed=9)
    assert np.array_equal(back.predict(x)[0], m.predict(x)[0])
    save_model(back, tmp_path / "m2.tcnn")
    assert (tmp_path / "m.tcnn").read_bytes() == (tmp_path / "m2.tcnn").read_bytes()


def test_model_format_errors(tmp_path):
    m = Model.initialise(TINY, 100.0, 1.0)
    p = tmp_path / "m.tcnn"
    save_model(m, p)
    blob = p.read_bytes()
    p.write_bytes(blob[:-8])
    with pytest.raises(FormatError):
        load_model(p)
    other = Model.initialise(ModelSpec(input_side=8, stem_channels=4, stem_stride=1, channels_per_stage=(4, 4)), 1, 1)
    save_model(other, p)
    # splice a different architecture's weights under this spec's descriptor
    desc_len = int.from_bytes(blob[6:10], "little")
    other_blob = p.read_bytes()
    other_len = int.from_bytes(other_blob[6:10], "little")
    p.write_bytes(blob[: 10 + desc_len] + other_blob[10 + other_len :])
    with pytest.raises(FormatError):
        load_model(p)
    p.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(FormatError):
        load_model(p)
