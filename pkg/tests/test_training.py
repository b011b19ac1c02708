import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import central_diff, rel_err
from woundfill.decoder import decode, sphere_template, synth_basis
from woundfill.encoder import EncoderConfig, encode, init_encoder
from woundfill.swav import SwavConfig, init_prototypes
from woundfill.training import (
    AdamState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    batch_masked_l1,
    finetune,
    finetune_batch_step,
    load_region_weights,
    masked_l1,
    pretrain_ssl,
    region_weights,
    split_dataset,
    subsample,
    uniform_weights,
    write_curve_csv,
)

TOY = EncoderConfig(input_size=8, channels=(2, 3), feature_dim=5, proj_dim=5, mapping_hidden=(6, 6), latent_dim=4)


# --- masked L1 --------------------------------------------------------------


def test_masked_l1_examples():
    r = np.random.default_rng(0)
    truth = r.normal(size=(10, 3))
    w = uniform_weights(10)
    assert masked_l1(truth, truth, w) == 0.0
    assert masked_l1(truth + [1, 0, 0], truth, w) == pytest.approx(1.0, abs=1e-15)


def test_zero_weight_drops_wound_exactly():
    r = np.random.default_rng(1)
    pred, truth = r.normal(size=(2, 20, 3))
    wound = np.array([3, 4, 5, 11])
    w = np.ones(20)
    w[wound] = 0.0
    keep = np.setdiff1d(np.arange(20), wound)
    manual = sum(np.abs(pred[i] - truth[i]).sum() for i in keep) / 20
    assert masked_l1(pred, truth, w) == pytest.approx(manual, rel=1e-14)


@given(st.integers(0, 2**32 - 1))
def test_masked_l1_nonnegative_and_zero_iff_equal(seed):
    r = np.random.default_rng(seed)
    pred, truth = r.normal(size=(2, 8, 3))
    w = r.uniform(0, 2, 8)
    w[0] = 0.0
    w[1] = 1.0
    assert masked_l1(pred, truth, w) > 0
    pred2 = truth.copy()
    pred2[0] += 5.0  # only a zero-weight vertex differs
    assert masked_l1(pred2, truth, w) == 0.0


def test_masked_l1_rejects_mismatch():
    with pytest.raises(ValueError):
        masked_l1(np.zeros((4, 3)), np.zeros((5, 3)), np.ones(4))
    with pytest.raises(ValueError):
        masked_l1(np.zeros((4, 3)), np.zeros((4, 3)), np.zeros(4))


def test_batch_masked_l1_is_mean():
    r = np.random.default_rng(2)
    pred, truth = r.normal(size=(2, 3, 7, 3))
    w = r.uniform(0.5, 1.5, 7)
    loss, _ = batch_masked_l1(pred, truth, w)
    assert loss == pytest.approx(np.mean([masked_l1(pred[i], truth[i], w) for i in range(3)]), rel=1e-14)


def test_region_weights(tmp_path):
    dirs, _ = sphere_template(642)
    w = region_weights(dirs)
    assert w.shape == (642,) and set(np.unique(w)) == {1.0, 2.0}
    (tmp_path / "w.csv").write_text("vertex_index,weight\n0,0.0\n5,3.5\n")
    lw = load_region_weights(tmp_path / "w.csv", 10)
    assert lw[0] == 0.0 and lw[5] == 3.5 and lw[1] == 1.0


# --- Adam -------------------------------------------------------------------


def test_adam_zero_gradient():
    p = {"x": np.array([1.5, -2.0])}
    state = AdamState(3, {"x": np.array([0.2, 0.1])}, {"x": np.array([0.01, 0.02])})
    p2, s2 = adam_step(p, {"x": np.zeros(2)}, state, 1e-3)
    np.testing.assert_allclose(p2["x"], p["x"] - 1e-3 * (0.9 * state.m["x"] / (1 - 0.9**4)) / (np.sqrt(0.999 * state.v["x"] / (1 - 0.999**4)) + 1e-8))
    np.testing.assert_allclose(s2.m["x"], 0.9 * state.m["x"])
    np.testing.assert_allclose(s2.v["x"], 0.999 * state.v["x"])
    fresh, _ = adam_step(p, {"x": np.zeros(2)}, AdamState(), 1e-3)
    assert np.array_equal(fresh["x"], p["x"])


def test_adam_first_step_by_hand():
    lr = 1e-3
    p2, s = adam_step({"p": np.array(0.0)}, {"p": np.array(1.0)}, AdamState(), lr)
    assert s.m["p"] == pytest.approx(0.1) and s.v["p"] == pytest.approx(0.001)
    want = -lr * (0.1 / 0.1) / (np.sqrt(0.001 / 0.001) + 1e-8)
    assert p2["p"] == pytest.approx(want, rel=1e-12)
    assert p2["p"] == pytest.approx(-lr, rel=1e-7)


def test_adam_constant_gradient_limit():
    lr = 1e-2
    p, s = {"p": np.array(0.0)}, AdamState()
    for _ in range(1000):
        prev = float(p["p"])
        p, s = adam_step(p, {"p": np.array(0.7)}, s, lr)
    assert abs(prev - float(p["p"])) == pytest.approx(lr, rel=1e-6)


def test_adam_rejects_nan_and_bad_lr():
    with pytest.raises(FloatingPointError, match="'w'"):
        adam_step({"w": np.zeros(3)}, {"w": np.array([0, np.nan, 1])}, AdamState(), 1e-3)
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(3)}, AdamState(), 0.0)


def test_adam_leaves_inputs_alone():
    p = {"w": np.ones(2)}
    adam_step(p, {"w": np.ones(2)}, AdamState(), 0.1)
    assert np.array_equal(p["w"], np.ones(2))


# --- splits -----------------------------------------------------------------


def test_split_ten():
    s = split_dataset(range(10), 0)
    assert [list(s.values()).count(p) for p in ("train", "validation", "test")] == [6, 2, 2]


@given(st.integers(5, 200), st.integers(0, 2**32 - 1))
def test_split_partition(n, seed):
    s = split_dataset(range(n), seed)
    assert sorted(s) == list(range(n))
    counts = [list(s.values()).count(p) for p in ("train", "validation", "test")]
    assert counts[0] == int(n * 0.6 + 0.5) and counts[1] == int(n * 0.2 + 0.5)
    assert sum(counts) == n
    assert s == split_dataset(range(n), seed)


def test_split_needs_five():
    with pytest.raises(ValueError):
        split_dataset(range(4), 0)


def test_subsample_fraction():
    idx = subsample(100, 0.2, 3)
    assert len(idx) == 20 and len(set(idx)) == 20
    assert np.array_equal(idx, subsample(100, 0.2, 3))


def test_config_validation():
    for kw in ({"learning_rate": -1}, {"batch_size": 0}, {"epochs": 0}, {"mode": "x"}, {"data_fraction": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


# --- loops ------------------------------------------------------------------


@pytest.fixture(scope="module")
def toy_problem():
    basis = synth_basis(0, 12, 4, 1.0)
    r = np.random.default_rng(0)
    images = r.uniform(size=(12, 8, 8))
    codes = r.uniform(-1, 1, (12, 4))
    targets = decode(basis, codes)
    return basis, images, targets


def test_end_to_end_gradient(toy_problem):
    basis, images, targets = toy_problem
    enc = init_encoder(TOY, 4)
    w = np.random.default_rng(1).uniform(0.5, 1.5, 12)
    imgs, tgts = images[:3], targets[:3]
    _, grads = finetune_batch_step(enc, basis, imgs, tgts, w)

    def loss():
        pred = decode(basis, encode(enc, imgs))
        return np.mean([masked_l1(pred[i], tgts[i], w) for i in range(3)])

    for name in sorted(grads):
        assert rel_err(grads[name], central_diff(loss, enc.params[name])) < 1e-4, name


def test_finetune_learns_and_freezes_decoder(toy_problem):
    basis, images, targets = toy_problem
    before = basis.to_bytes()
    cfg = TrainConfig(batch_size=4, epochs=15, learning_rate=3e-3)
    enc0 = init_encoder(TOY, 0)
    enc, curves = finetune((images, targets), enc0, basis, uniform_weights(12), cfg, val=(images[:2], targets[:2]))
    assert basis.to_bytes() == before
    assert len(curves.train) == len(curves.val) == 15
    assert curves.train[-1] < curves.train[0]
    # only encoder parameters change, and the input encoder is untouched
    assert not np.array_equal(enc.params["map2.w"], enc0.params["map2.w"])
    assert np.array_equal(enc0.params["map2.w"], init_encoder(TOY, 0).params["map2.w"])


def test_finetune_deterministic(toy_problem):
    basis, images, targets = toy_problem
    cfg = TrainConfig(batch_size=5, epochs=3)
    a, ca = finetune((images, targets), init_encoder(TOY, 1), basis, uniform_weights(12), cfg)
    b, cb = finetune((images, targets), init_encoder(TOY, 1), basis, uniform_weights(12), cfg)
    assert ca.train == cb.train
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_finetune_divergence_reports_epoch(toy_problem):
    basis, images, targets = toy_problem
    bad = images.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        finetune((bad, targets), init_encoder(TOY, 1), basis, uniform_weights(12), TrainConfig(batch_size=12, epochs=2))
    assert info.value.epoch == 0


def test_pretrain_bookkeeping():
    imgs = np.random.default_rng(0).uniform(size=(4, 8, 8))
    protos = init_prototypes(5, 3, 0)
    enc, p, curve = pretrain_ssl(imgs, init_encoder(TOY, 0), protos, TrainConfig(epochs=1, mode="pretrain"), SwavConfig(n_prototypes=3))
    assert len(curve) == 1 and np.isfinite(curve[0])
    np.testing.assert_allclose(np.linalg.norm(p, axis=0), 1.0, atol=1e-9)


@pytest.mark.parametrize("fraction", [0.2, 1.0])
def test_pretrain_fractions(fraction):
    imgs = np.random.default_rng(0).uniform(size=(10, 8, 8))
    cfg = TrainConfig(epochs=2, batch_size=4, mode="pretrain", data_fraction=fraction)
    _, p, curve = pretrain_ssl(imgs, init_encoder(TOY, 0), init_prototypes(5, 3, 0), cfg, SwavConfig(n_prototypes=3))
    assert len(curve) == 2
    np.testing.assert_allclose(np.linalg.norm(p, axis=0), 1.0, atol=1e-9)


def test_frozen_control_run_has_flat_curve():
    imgs = np.random.default_rng(0).uniform(size=(6, 8, 8))
    cfg = TrainConfig(epochs=4, batch_size=3, learning_rate=0.0, mode="pretrain", vary_epoch_seed=False)
    enc0 = init_encoder(TOY, 0)
    enc, _, curve = pretrain_ssl(imgs, enc0, init_prototypes(5, 3, 0), cfg, SwavConfig(n_prototypes=3))
    assert len(set(curve)) == 1
    assert all(np.array_equal(enc.params[k], enc0.params[k]) for k in enc.params)


def test_curve_csv(tmp_path):
    write_curve_csv(tmp_path / "c.csv", [1.0, 0.5], [0.9, 0.4])
    assert (tmp_path / "c.csv").read_text() == "epoch,train_loss,val_loss\n1,1.000000,0.900000\n2,0.500000,0.400000\n"
