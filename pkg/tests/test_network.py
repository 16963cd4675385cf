import math

import numpy as np
import pytest

from roadsurf.features import Dataset, NormStats
from roadsurf.network import (
    DEFAULT_DIMS,
    ModelFormatError,
    TrainConfig,
    forward,
    gradient,
    init_model,
    load_model,
    loss,
    model_from_bytes,
    model_to_bytes,
    n_params,
    save_model,
    softmax,
    train,
)
from roadsurf.pointcloud import Region


def loop_forward(model, x):
    """Scalar loops over neurons, independent of the matrix code."""
    a = list(x)
    layers = model.layers()
    for li, (W, b) in enumerate(layers):
        z = [b[j] + sum(a[i] * W[i, j] for i in range(len(a))) for j in range(W.shape[1])]
        if li < len(layers) - 1:
            a = [math.tanh(v) for v in z]
        else:
            m = max(z)
            e = [math.exp(v - m) for v in z]
            a = [v / sum(e) for v in e]
    return np.array(a)


def test_param_count():
    assert n_params((2, 3, 2)) == 2 * 3 + 3 + 3 * 2 + 2
    assert init_model().theta.size == n_params(DEFAULT_DIMS)


def test_softmax_properties():
    z = np.array([[1000.0, 1000.0], [0.0, np.log(3.0)]])
    p = softmax(z)
    assert np.allclose(p, [[0.5, 0.5], [0.25, 0.75]])


def test_zero_weights_give_uniform_output():
    m = init_model((33, 5, 9))
    m.theta[:] = 0
    assert np.allclose(forward(m, np.ones(33)), 1 / 9)


def test_forward_matches_loop_oracle(rng):
    m = init_model((6, 5, 4, 3), rng)
    m.theta[:] = rng.normal(0, 0.5, m.theta.size)
    for x in rng.normal(0, 1, (5, 6)):
        assert np.allclose(forward(m, x), loop_forward(m, x), atol=1e-12, rtol=0)
    X = rng.normal(0, 1, (7, 6))
    assert np.allclose(forward(m, X).sum(axis=1), 1.0)


def test_forward_rejects_bad_input():
    m = init_model((4, 3, 2))
    with pytest.raises(ValueError):
        forward(m, np.zeros(5))
    with pytest.raises(ValueError):
        forward(m, np.array([0, np.nan, 0, 0]))


def test_loss_matches_double_loop(rng):
    m = init_model((4, 6, 3), rng)
    x = rng.normal(0, 1, (10, 4))
    t = np.eye(3)[rng.integers(0, 3, 10)]
    lam = 0.3
    total = 0.0
    for n in range(10):
        p = loop_forward(m, x[n])
        for c in range(3):
            total += (p[c] - t[n, c]) ** 2
    expected = total / 10 + lam / 2 * sum(th * th for th in m.theta)
    assert loss(m, x, t, lam) == pytest.approx(expected, rel=1e-12)


def test_perfect_prediction_loss_is_weight_penalty_only():
    m = init_model((2, 2))
    m.theta[:] = [50.0, -50.0, -50.0, 50.0, 0.0, 0.0]
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    t = np.eye(2)
    assert loss(m, x, t, 0.0) < 1e-12
    assert loss(m, x, t, 1.0) == pytest.approx(0.5 * 4 * 2500, rel=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_gradient_central_differences(seed):
    r = np.random.default_rng(seed)
    m = init_model((5, 7, 4, 3), r)
    x = r.normal(0, 1, (12, 5))
    t = np.eye(3)[r.integers(0, 3, 12)]
    lam = 1e-2
    g = gradient(m, x, t, lam)
    h = 1e-5
    for i in r.choice(m.theta.size, 25, replace=False):
        up, dn = m.theta.copy(), m.theta.copy()
        up[i] += h
        dn[i] -= h
        fd = (loss(m.with_theta(up), x, t, lam) - loss(m.with_theta(dn), x, t, lam)) / (2 * h)
        assert abs(fd - g[i]) <= 1e-4 * max(abs(fd), abs(g[i]), 1e-6)


def test_init_is_deterministic():
    a, b = init_model(rng=7), init_model(rng=7)
    assert np.array_equal(a.theta, b.theta)
    assert not np.array_equal(a.theta, init_model(rng=8).theta)
    # biases start at zero, weights within the Glorot bound
    for W, bias in a.layers():
        assert not bias.any()
        assert np.abs(W).max() <= np.sqrt(6 / sum(W.shape))


def test_model_round_trip(tmp_path, rng):
    m = init_model((5, 4, 3), rng, NormStats(rng.normal(size=5), rng.uniform(1, 2, 5)), Region.RF)
    path = tmp_path / "m.rsnm"
    save_model(m, path)
    back = load_model(path)
    assert back.dims == m.dims and back.region is Region.RF
    assert np.array_equal(back.theta, m.theta)
    assert np.array_equal(back.norm.mean, m.norm.mean) and np.array_equal(back.norm.std, m.norm.std)
    assert model_to_bytes(back) == path.read_bytes()


def test_model_file_rejects_corruption(rng):
    raw = model_to_bytes(init_model((5, 4, 3), rng))
    with pytest.raises(ModelFormatError):
        model_from_bytes(raw[:-8])
    with pytest.raises(ModelFormatError):
        model_from_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ModelFormatError):
        model_from_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(ModelFormatError):
        model_from_bytes(raw + b"\0")


def _two_blobs(seed, n):
    r = np.random.default_rng(seed)
    y = r.integers(0, 2, n)
    x = r.normal(0, 1, (n, 4)) + np.where(y[:, None] == 1, 4.0, -4.0) + 100.0
    return Dataset(np.zeros(n, int), x, np.eye(2)[y])


def test_separable_two_class_problem():
    tr, va = _two_blobs(0, 600), _two_blobs(1, 300)
    cfg = TrainConfig(max_epochs=30, hidden=(8,), batch_size=64)
    m = train(tr, va, cfg)
    acc = np.mean(m.predict(va.x) == va.labels)
    assert acc >= 0.99
    assert m.history and len(m.history) <= 30


def test_training_is_deterministic():
    tr, va = _two_blobs(0, 200), _two_blobs(1, 100)
    cfg = TrainConfig(max_epochs=5, hidden=(6,), batch_size=32)
    a, b = train(tr, va, cfg), train(tr, va, cfg)
    assert model_to_bytes(a) == model_to_bytes(b)


def test_training_reduces_loss():
    tr, va = _two_blobs(2, 300), _two_blobs(3, 100)
    m = train(tr, va, TrainConfig(max_epochs=15, hidden=(6,), batch_size=300, patience=15))
    vals = [h["val_loss"] for h in m.history]
    assert min(vals) < vals[0]


def test_train_rejects_empty():
    ds = _two_blobs(0, 10)
    empty = Dataset(np.zeros(0, int), np.zeros((0, 4)), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        train(empty, ds)
