import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roadsurf.fusion import FusionConfig, FusionState, classify, fuse, omega_weights, stack_probs, step
from roadsurf.pointcloud import MAX_SPEED

CFG = FusionConfig()


def weighted_sum_loop(stacked, alpha):
    n_c = len(stacked) // len(alpha)
    out = [0.0] * n_c
    for l, a in enumerate(alpha):
        for c in range(n_c):
            out[c] += a * stacked[l * n_c + c]
    return np.array(out)


def test_alpha_stationary():
    assert omega_weights([0.0] * 5).tolist() == [1, 0, 0, 0, 0, 0]


def test_alpha_constant_speed():
    assert np.allclose(omega_weights([10.0] * 5), np.array([12, 1, 2, 3, 4, 5]) / 27, atol=1e-15)


def test_alpha_decelerating():
    a = omega_weights([10, 8, 6, 4, 2])
    assert np.allclose(a, np.array([12, 1.0, 1.6, 1.8, 1.6, 1.0]) / 19, atol=1e-15)
    assert np.allclose(a, [0.6316, 0.0526, 0.0842, 0.0947, 0.0842, 0.0526], atol=5e-5)


def test_alpha_clamps_past_entries():
    a = omega_weights([100.0] * 5)
    assert np.allclose(a, np.array([12, 10, 12, 12, 12, 12]) / 70)


def test_literal_normalizer_flag():
    cfg = FusionConfig(literal_normalizer=True)
    a = omega_weights([10.0] * 5, cfg)
    assert np.allclose(a, np.array([12, 1, 2, 3, 4, 5]) / 26)
    assert a.sum() > 1.0


def test_alpha_errors():
    with pytest.raises(ValueError):
        omega_weights([1, 1, 1, -1, 1])
    with pytest.raises(ValueError):
        omega_weights([1, 1])


def test_fuse_examples():
    out = fuse(stack_probs([0.6, 0.4], [[0.1, 0.9]]), [0.8, 0.2])
    assert np.allclose(out, [0.5, 0.5])
    assert classify(out) == 0
    p = np.array([0.2, 0.3, 0.5])
    assert np.allclose(fuse(np.tile(p, 6), omega_weights([5.0] * 5)), p)
    with pytest.raises(ValueError):
        fuse(np.ones(7), [0.5, 0.5])


def test_classify_ties():
    assert classify(np.eye(9)[8]) == 8
    assert classify(np.full(9, 1 / 9)) == 0


def test_kron_matches_loop(rng):
    for _ in range(200):
        stacked = rng.dirichlet(np.ones(9), 6).ravel()
        alpha = omega_weights(rng.uniform(0, MAX_SPEED, 5))
        assert np.max(np.abs(fuse(stacked, alpha) - weighted_sum_loop(stacked, alpha))) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, MAX_SPEED), min_size=5, max_size=5), st.integers(0, 2**32 - 1))
def test_simplex_and_convexity(speeds, seed):
    a = omega_weights(speeds)
    assert np.all(a >= 0) and abs(a.sum() - 1) < 1e-12
    # the current frame dominates at legal speeds
    assert a[0] >= 12 / (12 + sum(l * 0.1 * MAX_SPEED for l in range(1, 6))) - 1e-12
    vecs = np.random.default_rng(seed).dirichlet(np.ones(9), 6)
    out = fuse(vecs.ravel(), a)
    assert abs(out.sum() - 1) < 1e-12
    assert np.all(out >= vecs.min(axis=0) - 1e-15) and np.all(out <= vecs.max(axis=0) + 1e-15)


def algorithm1_transcription(near, far, speeds, l_s=5, T_s=0.1, beta1=12.0):
    """Straight-line rendering of the per-frame fusion loop with explicit indices."""
    finals = []
    for k in range(1, len(near) + 1):
        if k <= l_s:
            finals.append(list(near[k - 1]))
            continue
        w = [beta1]
        for l in range(1, l_s + 1):
            w.append(min(l * T_s * speeds[k - 1 - l], beta1))
        total = sum(w)
        p = [0.0] * len(near[0])
        for c in range(len(p)):
            p[c] = w[0] / total * near[k - 1][c]
            for l in range(1, l_s + 1):
                p[c] += w[l] / total * far[k - 1 - l][c]
        finals.append(p)
    return np.array(finals)


def scripted_trace():
    near = np.array([
        [0.7, 0.2, 0.1], [0.6, 0.3, 0.1], [0.1, 0.8, 0.1], [0.3, 0.3, 0.4], [0.5, 0.25, 0.25], [0.2, 0.7, 0.1],
        [0.9, 0.05, 0.05], [0.4, 0.4, 0.2], [0.1, 0.1, 0.8], [0.33, 0.33, 0.34], [0.6, 0.2, 0.2], [0.05, 0.9, 0.05],
    ])
    far = np.array([
        [0.1, 0.1, 0.8], [0.2, 0.6, 0.2], [0.5, 0.4, 0.1], [0.9, 0.05, 0.05], [0.3, 0.3, 0.4], [0.25, 0.5, 0.25],
        [0.1, 0.8, 0.1], [0.6, 0.2, 0.2], [0.0, 0.0, 1.0], [0.4, 0.5, 0.1], [0.7, 0.1, 0.2], [0.2, 0.2, 0.6],
    ])
    speeds = [0.0, 2.0, 5.5, 8.0, 13.9, 13.9, 12.0, 9.0, 4.0, 0.0, 1.0, 6.0]
    return near, far, speeds


def test_algorithm1_matches_transcription():
    near, far, speeds = scripted_trace()
    state = FusionState()
    got = []
    for k in range(1, 13):
        out = step(state, k, near[k - 1], far[k - 1], speeds[k - 1])
        got.append(out.p_final)
        assert out.fused == (k > 5)
    got = np.array(got)
    assert np.array_equal(got[:5], near[:5])
    assert np.allclose(got, algorithm1_transcription(near, far, speeds), atol=1e-15, rtol=0)


def test_step_fixed_point_one_hot():
    state = FusionState()
    e = np.eye(9)[3]
    for k in range(1, 20):
        assert np.allclose(step(state, k, e, e, 7.0).p_final, e)


def test_step_rejects_out_of_order():
    state = FusionState()
    step(state, 1, np.ones(2) / 2, np.ones(2) / 2, 1.0)
    with pytest.raises(ValueError):
        step(state, 3, np.ones(2) / 2, np.ones(2) / 2, 1.0)
    with pytest.raises(ValueError):
        step(state, 2, np.ones(2) / 2, np.ones(2) / 2, -1.0)


def test_left_right_independence(rng):
    near, far, speeds = scripted_trace()
    left_a, left_b, right_a, right_b = FusionState(), FusionState(), FusionState(), FusionState()
    perm = rng.permutation(12)
    outs_a, outs_b = [], []
    for k in range(1, 13):
        outs_a.append(step(left_a, k, near[k - 1], far[k - 1], speeds[k - 1]).p_final)
        step(right_a, k, far[k - 1], near[k - 1], speeds[k - 1])
        outs_b.append(step(left_b, k, near[k - 1], far[k - 1], speeds[k - 1]).p_final)
        step(right_b, k, far[perm[k - 1]], near[perm[k - 1]], speeds[k - 1])
    assert np.array_equal(np.array(outs_a), np.array(outs_b))
