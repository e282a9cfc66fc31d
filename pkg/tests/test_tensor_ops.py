import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from backdoor_lab import tensor_ops as T
from backdoor_lab.errors import DimensionError, DomainError

N_INSTANCES = 20
FD_TOL = 1e-3


def conv_oracle(x, w, b, stride, pad):
    """Six nested loops; accumulation order C_in, then kernel row, then kernel col."""
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.zeros((c_in, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((c_out, ho, wo), dtype=x.dtype)
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = x.dtype.type(0)
                for c in range(c_in):
                    for u in range(k):
                        for v in range(k):
                            acc += xp[c, i * stride + u, j * stride + v] * w[o, c, u, v]
                out[o, i, j] = acc + b[o]
    return out


def pool_oracle(x):
    c, h, w = x.shape
    out = np.zeros((c, h // 2, w // 2), dtype=x.dtype)
    idx = np.zeros((c, h // 2, w // 2), dtype=np.int64)
    for ch in range(c):
        for i in range(h // 2):
            for j in range(w // 2):
                best, best_idx = -np.inf, -1
                for u in range(2):
                    for v in range(2):
                        r, q = 2 * i + u, 2 * j + v
                        if x[ch, r, q] > best:
                            best, best_idx = x[ch, r, q], r * w + q
                out[ch, i, j] = best
                idx[ch, i, j] = best_idx
    return out, idx


# ---------------------------------------------------------------- conv


def test_conv_identity_kernel():
    x = np.random.default_rng(0).random((1, 5, 5), dtype=np.float32)
    out = T.conv2d_forward(x, np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32))
    assert np.array_equal(out, x)


def test_conv_zero_weights_gives_bias_planes():
    x = np.random.default_rng(1).random((2, 6, 6), dtype=np.float32)
    b = np.array([0.5, -2.0, 3.0], np.float32)
    out = T.conv2d_forward(x, np.zeros((3, 2, 3, 3), np.float32), b, pad=1)
    for o in range(3):
        assert np.all(out[o] == b[o])


def test_conv_matches_nested_loop_oracle_1x4x4():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 4, 4)).astype(np.float32)
    w = rng.standard_normal((2, 1, 3, 3)).astype(np.float32)
    b = rng.standard_normal(2).astype(np.float32)
    # BLAS accumulation order differs from the oracle, so compare to float32 rounding
    np.testing.assert_allclose(T.conv2d_forward(x, w, b, 1, 1), conv_oracle(x, w, b, 1, 1), rtol=1e-5, atol=1e-6)


def test_conv_oracle_exact_in_float64_on_integers():
    rng = np.random.default_rng(3)
    x = rng.integers(-4, 5, (3, 7, 7)).astype(np.float64)
    w = rng.integers(-3, 4, (4, 3, 3, 3)).astype(np.float64)
    b = rng.integers(-2, 3, 4).astype(np.float64)
    for stride, pad in [(1, 0), (1, 1), (2, 0), (2, 1)]:
        assert np.array_equal(T.conv2d_forward(x, w, b, stride, pad), conv_oracle(x, w, b, stride, pad))


def test_conv_batch_equals_per_sample():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, 2, 6, 6)).astype(np.float32)
    w = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    batch = T.conv2d_forward(x, w, b, 1, 1)
    for n in range(3):
        np.testing.assert_allclose(batch[n], T.conv2d_forward(x[n], w, b, 1, 1), rtol=1e-6, atol=1e-6)


def test_conv_shape_errors():
    x = np.zeros((2, 5, 5), np.float32)
    with pytest.raises(DimensionError, match="channel"):
        T.conv2d_forward(x, np.zeros((1, 3, 3, 3), np.float32), np.zeros(1, np.float32))
    with pytest.raises(DimensionError, match="odd"):
        T.conv2d_forward(x, np.zeros((1, 2, 2, 2), np.float32), np.zeros(1, np.float32))
    with pytest.raises(DimensionError, match="integral"):
        T.conv2d_forward(np.zeros((2, 6, 6), np.float32), np.zeros((1, 2, 3, 3), np.float32), np.zeros(1, np.float32), stride=2)
    with pytest.raises(DimensionError, match="bias"):
        T.conv2d_forward(x, np.zeros((1, 2, 3, 3), np.float32), np.zeros(2, np.float32))


def test_conv_backward_zero_d_output():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 5, 5)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    g = T.conv2d_backward(x, w, 1, 1, np.zeros((3, 5, 5), np.float32))
    assert not g.d_input.any() and not g.d_weights.any() and not g.d_bias.any()
    assert g.d_input.shape == x.shape and g.d_weights.shape == w.shape


def test_conv_backward_identity_kernel():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((1, 4, 4)).astype(np.float32)
    d = rng.standard_normal((1, 4, 4)).astype(np.float32)
    g = T.conv2d_backward(x, np.ones((1, 1, 1, 1), np.float32), 1, 0, d)
    assert np.array_equal(g.d_input, d)


def test_conv_backward_shape_mismatch():
    x = np.zeros((1, 4, 4), np.float32)
    with pytest.raises(DimensionError):
        T.conv2d_backward(x, np.zeros((2, 1, 3, 3), np.float32), 1, 1, np.zeros((2, 3, 3), np.float32))


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_conv_backward_finite_differences(seed):
    rng = np.random.default_rng(seed)
    c_in, c_out = rng.integers(1, 4), rng.integers(1, 4)
    stride, pad = [(1, 0), (1, 1), (2, 1)][seed % 3]
    size = 5 if stride == 2 else int(rng.integers(3, 7))
    x = rng.standard_normal((c_in, size, size))
    w = rng.standard_normal((c_out, c_in, 3, 3))
    b = rng.standard_normal(c_out)
    out_shape = T.conv2d_forward(x, w, b, stride, pad).shape
    r = rng.standard_normal(out_shape)  # random linear functional of the output
    g = T.conv2d_backward(x, w, stride, pad, r)
    assert T.finite_diff_check(lambda p: (T.conv2d_forward(p, w, b, stride, pad) * r).sum(), g.d_input, x) < FD_TOL
    assert T.finite_diff_check(lambda p: (T.conv2d_forward(x, p, b, stride, pad) * r).sum(), g.d_weights, w) < FD_TOL
    assert T.finite_diff_check(lambda p: (T.conv2d_forward(x, w, p, stride, pad) * r).sum(), g.d_bias, b) < FD_TOL


# ---------------------------------------------------------------- relu


def test_relu_examples():
    assert np.array_equal(T.relu_forward(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    assert np.array_equal(T.relu_backward(np.array([-1.0, 2.0]), np.array([5.0, 5.0])), [0, 5])


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_relu_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    x = rng.standard_normal(30)
    x[np.abs(x) < 0.01] = 0.5  # stay away from the kink
    r = rng.standard_normal(30)
    g = T.relu_backward(x, r)
    assert T.finite_diff_check(lambda p: (T.relu_forward(p) * r).sum(), g, x) < FD_TOL


@given(arrays(np.float32, st.integers(1, 40), elements=st.floats(-1e3, 1e3, width=32)))
def test_relu_idempotent(x):
    once = T.relu_forward(x)
    assert np.array_equal(T.relu_forward(once), once)


# ---------------------------------------------------------------- maxpool


def test_maxpool_example():
    out, idx = T.maxpool2_forward(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    assert out[0, 0, 0] == 4 and idx[0, 0, 0] == 3
    d = T.maxpool2_backward(idx, np.array([[[7.0]]]), (1, 2, 2))
    assert np.array_equal(d, [[[0, 0], [0, 7]]])


def test_maxpool_ties_go_to_first_row_major():
    out, idx = T.maxpool2_forward(np.ones((1, 2, 2)))
    assert idx[0, 0, 0] == 0
    _, idx = T.maxpool2_forward(np.array([[[0.0, 5.0], [5.0, 5.0]]]))
    assert idx[0, 0, 0] == 1


def test_maxpool_rejects_odd():
    with pytest.raises(DimensionError):
        T.maxpool2_forward(np.zeros((1, 3, 4)))
    with pytest.raises(DimensionError):
        T.maxpool2_forward(np.zeros((1, 4, 5)))


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_maxpool_matches_oracle_8x8(seed):
    rng = np.random.default_rng(200 + seed)
    # small integer range forces ties
    x = rng.integers(0, 4, (2, 8, 8)).astype(np.float32)
    out, idx = T.maxpool2_forward(x)
    o_out, o_idx = pool_oracle(x)
    assert np.array_equal(out, o_out) and np.array_equal(idx, o_idx)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_maxpool_finite_differences(seed):
    rng = np.random.default_rng(300 + seed)
    x = rng.permutation(64).reshape(1, 8, 8).astype(np.float64) * 0.1  # distinct values, gaps 0.1
    out, idx = T.maxpool2_forward(x)
    r = rng.standard_normal(out.shape)
    g = T.maxpool2_backward(idx, r, x.shape)
    assert T.finite_diff_check(lambda p: (T.maxpool2_forward(p)[0] * r).sum(), g, x) < FD_TOL


@given(arrays(np.float64, (2, 4, 4), elements=st.floats(-100, 100)))
def test_maxpool_idempotent_on_constant_blocks(x):
    # pooling the upsampled pooled map gives the same map back
    out, _ = T.maxpool2_forward(x)
    up = np.repeat(np.repeat(out, 2, axis=1), 2, axis=2)
    again, _ = T.maxpool2_forward(up)
    assert np.array_equal(again, out)


# ---------------------------------------------------------------- dense


def test_dense_identity_and_zero():
    x = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(T.dense_forward(x, np.eye(3), np.zeros(3)), x)
    b = np.array([4.0, 5.0])
    assert np.array_equal(T.dense_forward(x, np.zeros((2, 3)), b), b)


def test_dense_shape_error():
    with pytest.raises(DimensionError):
        T.dense_forward(np.zeros(3), np.zeros((2, 4)), np.zeros(2))


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_dense_finite_differences(seed):
    rng = np.random.default_rng(400 + seed)
    n_in, n_out = rng.integers(1, 12, size=2)
    x, W, b = rng.standard_normal(n_in), rng.standard_normal((n_out, n_in)), rng.standard_normal(n_out)
    r = rng.standard_normal(n_out)
    g = T.dense_backward(x, W, r)
    assert T.finite_diff_check(lambda p: T.dense_forward(p, W, b) @ r, g.d_input, x) < FD_TOL
    assert T.finite_diff_check(lambda p: T.dense_forward(x, p, b) @ r, g.d_weights, W) < FD_TOL
    assert T.finite_diff_check(lambda p: T.dense_forward(x, W, p) @ r, g.d_bias, b) < FD_TOL


# ---------------------------------------------------------------- softmax xent


def test_xent_uniform_logits():
    loss, d = T.softmax_xent(np.zeros(10, np.float32), 3)
    assert loss == pytest.approx(math.log(10), abs=1e-6)
    assert loss == pytest.approx(2.302585, abs=1e-6)
    assert d[3] == pytest.approx(-0.9) and d[0] == pytest.approx(0.1)


def test_xent_dominant_label_logit():
    logits = np.zeros(10, np.float32)
    logits[4] = 1e4
    loss, d = T.softmax_xent(logits, 4)
    assert loss == pytest.approx(0.0, abs=1e-6)
    assert np.all(np.isfinite(d))


def test_xent_label_out_of_range():
    with pytest.raises(DomainError):
        T.softmax_xent(np.zeros(3), 3)
    with pytest.raises(DomainError):
        T.softmax_xent(np.zeros(3), -1)


def test_xent_stable_for_huge_logits():
    loss, d = T.softmax_xent(np.array([1e30, -1e30, 0.0]), 1)
    assert np.isfinite(loss) and np.all(np.isfinite(d))


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_xent_finite_differences(seed):
    rng = np.random.default_rng(500 + seed)
    k = int(rng.integers(2, 12))
    z = rng.standard_normal(k) * 3
    label = int(rng.integers(0, k))
    _, d = T.softmax_xent(z, label)
    assert T.finite_diff_check(lambda p: T.softmax_xent(p, label)[0], d, z) < FD_TOL


def test_xent_batch_is_mean():
    rng = np.random.default_rng(7)
    z = rng.standard_normal((4, 5))
    labels = np.array([0, 1, 2, 4])
    loss, d = T.softmax_xent(z, labels)
    singles = [T.softmax_xent(z[i], labels[i]) for i in range(4)]
    assert loss == pytest.approx(np.mean([s[0] for s in singles]))
    np.testing.assert_allclose(d, np.stack([s[1] for s in singles]) / 4)


# ---------------------------------------------------------------- checker


def test_finite_diff_check_detects_wrong_gradient():
    x = np.array([1.0, 2.0, 3.0])
    assert T.finite_diff_check(lambda p: (p ** 2).sum(), 2 * x, x) < 1e-6
    assert T.finite_diff_check(lambda p: (p ** 2).sum(), 3 * x, x) > 0.3


def test_finite_diff_check_zero_gradient_denominator():
    # both sides 0: the 1e-6 floor keeps the error finite and zero
    assert T.finite_diff_check(lambda p: 1.0, np.zeros(3), np.zeros(3)) == 0.0
