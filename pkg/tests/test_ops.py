import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drtanet.core import Tensor, ops
from drtanet.core.ops import upsample_matrix


def conv_oracle(x, w, b, stride, pad):
    """Direct seven-loop convolution."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for r in range(ho):
                for c in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for ci in range(cin):
                        for a in range(kh):
                            for bb in range(kw):
                                acc += xp[i, ci, r * stride + a, c * stride + bb] * w[o, ci, a, bb]
                    out[i, o, r, c] = acc
    return out


def test_conv2d_matches_loop_oracle_on_random_cases(f64):
    rng = np.random.default_rng(0)
    cases = 0
    while cases < 120:
        k = int(rng.choice([1, 3, 5, 7]))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, k // 2 + 1))
        h, w = (int(v) for v in rng.integers(max(1, k - 2 * pad), 9, size=2))
        if h + 2 * pad < k or w + 2 * pad < k:
            continue
        n, cin, cout = (int(v) for v in rng.integers(1, 4, size=3))
        x = rng.standard_normal((n, cin, h, w))
        wt = rng.standard_normal((cout, cin, k, k))
        b = rng.standard_normal(cout) if rng.random() < 0.5 else None
        got = ops.conv2d(Tensor(x), Tensor(wt), None if b is None else Tensor(b), stride, pad).data
        np.testing.assert_allclose(got, conv_oracle(x, wt, b, stride, pad), rtol=1e-10, atol=1e-10)
        cases += 1


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ValueError):
        ops.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))))


def test_upsample_matrix_formula():
    # output o samples (o + 0.5)/2 - 0.5, clamped at the edges
    m = upsample_matrix(3)
    expected = np.array(
        [
            [1.0, 0.0, 0.0],
            [0.75, 0.25, 0.0],
            [0.25, 0.75, 0.0],
            [0.0, 0.75, 0.25],
            [0.0, 0.25, 0.75],
            [0.0, 0.0, 1.0],
        ]
    )
    np.testing.assert_allclose(m, expected)
    np.testing.assert_allclose(upsample_matrix(7).sum(axis=1), 1.0)


def test_bilinear_upsample_is_separable_interpolation(rng, f64):
    x = rng.standard_normal((2, 3, 4, 5))
    got = ops.bilinear_upsample2x(Tensor(x)).data
    want = np.einsum("ph,nchw,qw->ncpq", upsample_matrix(4), x, upsample_matrix(5))
    np.testing.assert_allclose(got, want, rtol=1e-12)
    assert got.shape == (2, 3, 8, 10)


def test_upsample_preserves_constants(f64):
    x = np.full((1, 1, 3, 3), 2.5)
    np.testing.assert_allclose(ops.bilinear_upsample2x(Tensor(x)).data, 2.5)


def test_softmax_reference_values(f64):
    p = ops.masked_softmax(Tensor(np.array([1.0, 2.0, 3.0])), np.ones(3, dtype=bool)).data
    np.testing.assert_allclose(p, [0.0900, 0.2447, 0.6652], atol=1e-4)


def test_masked_softmax_zeroes_invalid_and_renormalizes(f64):
    logits = np.array([[5.0, 1.0, 2.0, 3.0]])
    valid = np.array([[False, True, True, True]])
    p = ops.masked_softmax(Tensor(logits), valid).data
    assert p[0, 0] == 0.0
    e = np.exp([1.0, 2.0, 3.0])
    np.testing.assert_allclose(p[0, 1:], e / e.sum())


def test_masked_softmax_rejects_empty_slice():
    with pytest.raises(ValueError, match="no valid"):
        ops.masked_softmax(Tensor(np.zeros((2, 3))), np.array([[True, True, True], [False, False, False]]))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_shift_invariance(values, shift):
    z = np.array(values)
    valid = np.ones(z.shape, dtype=bool)
    a = ops.masked_softmax(Tensor(z, dtype=np.float64), valid).data
    b = ops.masked_softmax(Tensor(z + shift, dtype=np.float64), valid).data
    np.testing.assert_allclose(a, b, atol=1e-9)
    assert abs(a.sum() - 1.0) < 1e-12


def test_maxpool_matches_window_max(rng, f64):
    x = rng.standard_normal((2, 3, 7, 6))
    got = ops.maxpool2d(Tensor(x), 3, 2, 1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    for r in range(got.shape[2]):
        for c in range(got.shape[3]):
            np.testing.assert_array_equal(got[:, :, r, c], xp[:, :, 2 * r : 2 * r + 3, 2 * c : 2 * c + 3].max(axis=(2, 3)))


def test_avgpool_requires_even_size():
    with pytest.raises(ValueError, match="even"):
        ops.avgpool2x(Tensor(np.zeros((1, 1, 3, 4))))


def test_batch_norm_training_normalizes_and_updates_buffers(rng, f64):
    x = rng.standard_normal((4, 2, 3, 3)) * 3 + 1
    mean, var = np.zeros(2), np.ones(2)
    out = ops.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), mean, var, training=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-3)
    np.testing.assert_allclose(mean, 0.1 * x.mean(axis=(0, 2, 3)))
    m = 4 * 9
    np.testing.assert_allclose(var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))


def test_batch_norm_eval_uses_running_stats(f64):
    x = np.full((1, 1, 2, 2), 3.0)
    out = ops.batch_norm(Tensor(x), Tensor(np.array([2.0])), Tensor(np.array([0.5])), np.array([1.0]), np.array([4.0]), False)
    np.testing.assert_allclose(out.data, 2.0 * (3.0 - 1.0) / np.sqrt(4.0 + 1e-5) + 0.5)


def test_concat_channels_diagnoses_mismatch():
    with pytest.raises(ValueError, match="outside the channel axis"):
        ops.concat_channels([Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 4, 5)))])


def test_add_broadcast_gradient_shapes(f64):
    from drtanet.core import backward

    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones((3,)), requires_grad=True)
    backward(ops.total(ops.add(a, b)))
    assert b.grad.shape == (3,)
    np.testing.assert_allclose(b.grad, 2.0)
