import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import fd_gradient
from glomquant.errors import ConfigError, DegenerateEmbeddingError, ShapeError, StratificationError
from glomquant.learnkit import (
    AugmentPolicy,
    CosineSchedule,
    FocalLossParams,
    MomentumSGD,
    ToyNet,
    collapse_statistic,
    focal_loss,
    focal_loss_batch,
    linear_probe,
    negative_cosine_full,
    simsiam_loss,
    softmax,
    train_toy_simsiam,
    two_cluster_data,
)


def rel(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


def test_focal_value_at_half():
    mpmath.mp.dps = 30
    want = float(-(mpmath.mpf("0.5") ** mpmath.mpf("2.5")) * mpmath.log(mpmath.mpf("0.5")))
    loss, _ = focal_loss(np.array([0.5, 0.5]), 0, FocalLossParams(2.5))
    assert loss == pytest.approx(want, rel=1e-14)
    assert loss == pytest.approx(0.12253, abs=1e-5)


def test_gamma_zero_is_cross_entropy():
    logits = np.array([0.3, -1.2, 2.0])
    loss, grad = focal_loss(softmax(logits), 2, FocalLossParams(0.0))
    assert loss == pytest.approx(-math.log(softmax(logits)[2]))
    assert grad == pytest.approx(softmax(logits) - np.eye(3)[2])


def test_focal_confident_correct_is_finite():
    loss, grad = focal_loss(np.array([1.0, 0.0]), 0, FocalLossParams(2.5))
    assert loss == 0.0 and np.all(np.isfinite(grad))


def test_focal_input_checks():
    with pytest.raises(ValueError):
        focal_loss(np.array([0.5, 0.6]), 0)
    with pytest.raises(IndexError):
        focal_loss(np.array([0.5, 0.5]), 2)
    with pytest.raises(ConfigError):
        FocalLossParams(-1.0)


@given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 1.0, 2.5]))
def test_focal_batch_gradient(seed, gamma):
    rng = np.random.default_rng(seed)
    logits = rng.normal(0, 1.5, (4, 5))
    t = rng.integers(0, 5, 4)
    params = FocalLossParams(gamma, class_weights=rng.uniform(0.5, 2, 5))
    _, g = focal_loss_batch(logits, t, params)
    assert rel(g, fd_gradient(lambda z: focal_loss_batch(z, t, params)[0], logits)) < 1e-6


def test_inverse_frequency_weights():
    p = FocalLossParams.inverse_frequency([100, 50, 25, 25, 800])
    assert p.class_weights.mean() == pytest.approx(1.0)
    assert p.class_weights[2] == pytest.approx(4 * p.class_weights[0])


def test_simsiam_stop_gradient_and_full_variant():
    rng = np.random.default_rng(1)
    z1, z2, p1, p2 = (rng.normal(size=(3, 4)) for _ in range(4))
    loss, g = simsiam_loss(z1, z2, p1, p2)
    assert not g["z1"].any() and not g["z2"].any()
    assert -1.0 <= loss <= 1.0
    loss_full, gf = negative_cosine_full(z1, z2, p1, p2)
    assert loss_full == loss
    assert rel(gf["z1"], fd_gradient(lambda v: simsiam_loss(v, z2, p1, p2)[0], z1)) < 1e-6
    assert rel(gf["z2"], fd_gradient(lambda v: simsiam_loss(z1, v, p1, p2)[0], z2)) < 1e-6


def test_simsiam_identical_views_minimum():
    z = np.array([[1.0, 2.0, 3.0]])
    loss, _ = simsiam_loss(z, z, 2 * z, 2 * z)
    assert loss == pytest.approx(-1.0)


def test_simsiam_errors():
    with pytest.raises(DegenerateEmbeddingError):
        simsiam_loss(np.ones((1, 2)), np.ones((1, 2)), np.zeros((1, 2)), np.ones((1, 2)))
    with pytest.raises(ShapeError):
        simsiam_loss(np.ones((1, 2)), np.ones((1, 3)), np.ones((1, 2)), np.ones((1, 2)))


def test_cosine_schedule():
    s = CosineSchedule(0.05, 64, 100)
    assert s.effective_lr == pytest.approx(0.0125)
    assert s(0) == pytest.approx(0.0125)
    assert s(50) == pytest.approx(0.00625)
    assert s(100) == pytest.approx(0.0) and s(500) == pytest.approx(0.0)
    with pytest.raises(ConfigError):
        CosineSchedule(total_steps=0)


def test_momentum_sgd_matches_hand_unrolled():
    w = {"a": np.array([1.0, -2.0])}
    opt = MomentumSGD(w, momentum=0.9, weight_decay=0.1)
    grads = [np.array([0.5, 0.5]), np.array([-1.0, 2.0])]
    ref_w, v = np.array([1.0, -2.0]), np.zeros(2)
    for g, lr in zip(grads, (0.1, 0.05)):
        opt.step({"a": g}, lr)
        v = 0.9 * v + g + 0.1 * ref_w
        ref_w = ref_w - lr * v
    assert w["a"] == pytest.approx(ref_w)


def test_toynet_backprop_matches_finite_differences():
    rng = np.random.default_rng(0)
    net = ToyNet(5, 6, 4, 3, seed=1)
    x = rng.normal(size=(3, 5))
    wp, wz = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))

    def loss(vec):
        net.set_flat(vec)
        z, p, _ = net.forward(x)
        return float(np.sum(wp * p) + np.sum(wz * z))

    theta = net.flat().copy()
    num = fd_gradient(loss, theta)
    net.set_flat(theta)
    _, _, caches = net.forward(x)
    g = net.backward(caches, wp, wz)
    analytic = np.concatenate([g[k].ravel() for k in ("W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4")])
    assert rel(analytic, num) < 1e-7


def test_toynet_save_load(tmp_path):
    net = ToyNet(seed=3)
    net.save(tmp_path / "p.f32")
    back = ToyNet.load(tmp_path / "p.f32")
    x = np.random.default_rng(0).normal(size=(4, 16))
    assert np.allclose(back.encode(x), net.encode(x), atol=1e-5)
    assert (tmp_path / "p.f32").stat().st_size == 4 * net.flat().size


def test_collapse_statistic_extremes():
    assert collapse_statistic(np.ones((50, 8))) == pytest.approx(0.0)
    z = np.random.default_rng(0).normal(size=(20000, 16))
    assert collapse_statistic(z) == pytest.approx(1 / math.sqrt(16), rel=0.03)


def test_augment_is_seeded():
    x = np.ones((3, 4))
    a = AugmentPolicy()(x, np.random.default_rng(0))
    b = AugmentPolicy()(x, np.random.default_rng(0))
    assert np.array_equal(a, b)


def test_training_is_deterministic_and_probe_freezes_encoder():
    x, y = two_cluster_data(120, 8, seed=2)
    r1 = train_toy_simsiam(x, steps=60, batch_size=32, seed=4, dims=(16, 8, 8))
    r2 = train_toy_simsiam(x, steps=60, batch_size=32, seed=4, dims=(16, 8, 8))
    assert r1.net.encoder_bytes() == r2.net.encoder_bytes()
    assert r1.log == r2.log
    before = r1.net.encoder_bytes()
    res = linear_probe(r1.net, x[:90], y[:90], x[90:], y[90:], 0.25, seed=0)
    assert r1.net.encoder_bytes() == before
    assert res.n_train == sum(res.per_class.values())
    assert 0.0 <= res.balanced_accuracy <= 1.0


def test_probe_needs_every_class():
    x, y = two_cluster_data(40, 4)
    net = ToyNet(4, 8, 4, 4)
    y_train = np.zeros(30, dtype=int)
    with pytest.raises(StratificationError):
        linear_probe(net, x[:30], y_train, x[30:], y[30:])


def test_training_log_written(tmp_path):
    x, _ = two_cluster_data(64, 4)
    r = train_toy_simsiam(x, steps=10, batch_size=16, dims=(8, 4, 4), log_every=5)
    r.write_log(tmp_path / "m.jsonl")
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    assert len(lines) == 3
    assert len(r.collapse_per_epoch) == 3  # 4 steps per epoch, plus the final step
