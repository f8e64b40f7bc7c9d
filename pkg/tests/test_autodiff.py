import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ldct3d import autodiff as ad
from ldct3d.autodiff import Tensor
from ldct3d.volume import make_rng

from gradcheck import assert_grads, leaf, projected

def direct_conv(x, w, b, pad):
    """Plain loop cross-correlation for (N, C, *S) inputs."""
    nd = x.ndim - 2
    xp = np.pad(x, [(0, 0), (0, 0)] + [(pad, pad)] * nd)
    k = w.shape[2:]
    out_sp = tuple(xp.shape[2 + i] - k[i] + 1 for i in range(nd))
    out = np.zeros((x.shape[0], w.shape[0]) + out_sp)
    for n in range(x.shape[0]):
        for o in range(w.shape[0]):
            for pos in itertools.product(*(range(s) for s in out_sp)):
                win = xp[(n, slice(None)) + tuple(slice(p, p + kk) for p, kk in zip(pos, k))]
                out[(n, o) + pos] = np.sum(win * w[o]) + (b[o] if b is not None else 0.0)
    return out


# ---------------------------------------------------------------- conv


def test_conv_identity_kernel():
    x = make_rng(0).standard_normal((1, 1, 5, 6, 7))
    w = np.zeros((1, 1, 3, 3, 3))
    w[0, 0, 1, 1, 1] = 1
    assert np.array_equal(ad.conv(x, w, np.zeros(1)).data, x)


def test_conv_all_ones():
    out = ad.conv(np.ones((1, 1, 4, 4, 4)), np.ones((1, 1, 3, 3, 3)), np.zeros(1)).data[0, 0]
    assert out[1, 1, 1] == 27 and out[2, 2, 2] == 27
    assert out[0, 0, 0] == 8 and out[3, 3, 3] == 8
    assert out[0, 1, 1] == 18 and out[0, 0, 1] == 12


@pytest.mark.parametrize("exact", [False, True])
@pytest.mark.parametrize("dims,k", [(3, 3), (3, 1), (2, 3), (2, 1)])
def test_conv_matches_direct(dims, k, exact):
    rng = make_rng(dims * 10 + k)
    x = rng.standard_normal((2, 3) + (5,) * dims)
    w = rng.standard_normal((4, 3) + (k,) * dims)
    b = rng.standard_normal(4)
    with ad.exact_mode(exact):
        got = ad.conv(x, w, b).data
    assert np.allclose(got, direct_conv(x, w, b, k // 2), rtol=1e-12, atol=1e-12)


def test_conv_shape_mismatch():
    with pytest.raises(ValueError):
        ad.conv(np.zeros((1, 2, 4, 4, 4)), np.zeros((1, 3, 3, 3, 3)))


@pytest.mark.parametrize("exact", [False, True])
def test_conv_gradients(exact):
    rng = make_rng(1)
    x = leaf(rng.standard_normal((1, 2, 5, 5, 5)))
    w = leaf(rng.standard_normal((3, 2, 3, 3, 3)))
    b = leaf(rng.standard_normal(3))
    r = rng.standard_normal((1, 3, 5, 5, 5))
    with ad.exact_mode(exact):
        assert_grads(lambda: projected(ad.conv(x, w, b), r), [x, w, b], rng)


def test_conv_sum_gradient_wrt_bias():
    rng = make_rng(2)
    x = leaf(rng.standard_normal((1, 2, 5, 5, 5)))
    w = leaf(rng.standard_normal((3, 2, 3, 3, 3)))
    b = leaf(np.zeros(3))
    ad.backward(ad.sum_all(ad.conv(x, w, b)))
    assert np.allclose(b.grad, 125.0)
    assert_grads(lambda: ad.sum_all(ad.conv(x, w, b)), [x, w, b], rng)


def test_conv_gradients_2d_pointwise():
    rng = make_rng(3)
    x = leaf(rng.standard_normal((2, 3, 6, 6)))
    w = leaf(rng.standard_normal((2, 3, 1, 1)))
    b = leaf(rng.standard_normal(2))
    r = rng.standard_normal((2, 2, 6, 6))
    assert_grads(lambda: projected(ad.conv(x, w, b), r), [x, w, b], rng)


def test_conv_adjoint():
    """With zero bias, <conv(x), y> == <x, conv^T(y)> via the backward pass."""
    rng = make_rng(4)
    x = leaf(rng.standard_normal((1, 2, 6, 6, 6)))
    w = Tensor(rng.standard_normal((3, 2, 3, 3, 3)))
    y = rng.standard_normal((1, 3, 6, 6, 6))
    out = ad.conv(x, w)
    ad.backward(projected(out, y))
    assert abs(np.vdot(out.data, y) - np.vdot(x.data, x.grad)) < 1e-10 * abs(np.vdot(out.data, y))


def test_exact_mode_is_extent_independent():
    rng = make_rng(5)
    x = rng.standard_normal((1, 16, 12, 12, 12)).astype(np.float32)
    w = rng.standard_normal((16, 16, 3, 3, 3)).astype(np.float32)
    with ad.exact_mode():
        whole = ad.conv(x, w).data
        part = ad.conv(x[:, :, 2:9, 3:11, 1:12], w).data
    # interior voxels of the sub-block see identical inputs and must match bit for bit
    assert np.array_equal(part[:, :, 1:-1, 1:-1, 1:-1], whole[:, :, 3:8, 4:10, 2:11])


# ----------------------------------------------------------- batch norm


def _bn_inputs(rng, shape=(3, 4, 5, 5, 5)):
    c = shape[1]
    x = leaf(rng.standard_normal(shape) * 2 + 1)
    gamma = leaf(rng.uniform(0.5, 1.5, c))
    beta = leaf(rng.standard_normal(c))
    return x, gamma, beta, np.zeros(c), np.ones(c)


def test_batchnorm_train_normalizes():
    rng = make_rng(6)
    x, _, _, rm, rv = _bn_inputs(rng)
    y = ad.batchnorm(x, np.ones(4), np.zeros(4), rm, rv, training=True).data
    axes = (0, 2, 3, 4)
    assert np.allclose(y.mean(axis=axes), 0, atol=1e-6)
    # eps shrinks the variance by var / (var + eps)
    var = x.data.var(axis=axes)
    assert np.allclose(y.var(axis=axes), var / (var + 1e-5), atol=1e-6)
    assert np.allclose(y.var(axis=axes), 1, atol=1e-5)


def test_batchnorm_running_stats():
    rng = make_rng(7)
    x, g, b, rm, rv = _bn_inputs(rng)
    ad.batchnorm(x, g, b, rm, rv, training=True, momentum=0.1)
    axes = (0, 2, 3, 4)
    m = x.data.size // 4
    assert np.allclose(rm, 0.1 * x.data.mean(axis=axes))
    assert np.allclose(rv, 0.9 + 0.1 * x.data.var(axis=axes) * m / (m - 1))


def test_batchnorm_eval_identity_stats():
    x = make_rng(8).standard_normal((2, 3, 4, 4))
    y = ad.batchnorm(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), training=False).data
    assert np.allclose(y, x / np.sqrt(1 + 1e-5), rtol=1e-12)


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradients(training):
    rng = make_rng(9)
    x, g, b, rm, rv = _bn_inputs(rng, (2, 3, 4, 4, 4))
    rm[:] = rng.standard_normal(3)
    rv[:] = rng.uniform(0.5, 2, 3)
    r = rng.standard_normal(x.shape)

    def loss():
        # running stats are copies so repeated evaluations see the same state
        return projected(ad.batchnorm(x, g, b, rm.copy(), rv.copy(), training), r)

    assert_grads(loss, [x, g, b], rng)


def test_batchnorm_validation():
    with pytest.raises(ValueError):
        ad.batchnorm(np.zeros((1, 2, 3)), np.ones(3), np.zeros(3), np.zeros(2), np.ones(2), True)
    with pytest.raises(ValueError):
        ad.batchnorm(np.zeros((0, 2, 3)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), True)


# ------------------------------------------------------------ leaky relu


def test_leaky_relu_values():
    assert np.allclose(ad.leaky_relu(np.array([-1.0, 0.0, 2.0]), 0.01).data, [-0.01, 0.0, 2.0])
    x = make_rng(0).standard_normal(10)
    assert np.array_equal(ad.leaky_relu(x, 1.0).data, x)


def test_leaky_relu_gradient():
    rng = make_rng(10)
    v = rng.standard_normal((4, 5))
    v[np.abs(v) < 1e-3] = 0.5  # keep away from the kink
    x = leaf(v)
    r = rng.standard_normal(v.shape)
    assert_grads(lambda: projected(ad.leaky_relu(x, 0.01), r), [x], rng, samples=20)
    x.grad = None
    ad.backward(ad.sum_all(ad.leaky_relu(x, 0.2)))
    assert np.array_equal(x.grad, np.where(v > 0, 1.0, 0.2))


def test_leaky_relu_subgradient_at_zero():
    x = leaf([0.0])
    ad.backward(ad.sum_all(ad.leaky_relu(x, 0.01)))
    assert x.grad[0] == 0.01


# -------------------------------------------------------------- max pool


def test_maxpool_shapes():
    assert ad.maxpool(np.zeros((1, 2, 128, 128, 128), np.float32)).shape == (1, 2, 64, 64, 64)
    assert ad.maxpool(np.zeros((3, 1, 8, 6))).shape == (3, 1, 4, 3)
    with pytest.raises(ValueError):
        ad.maxpool(np.zeros((1, 1, 5, 4, 4)))


def test_maxpool_matches_loop():
    x = make_rng(11).standard_normal((2, 3, 4, 6, 8))
    out = ad.maxpool(x).data
    for n, c, i, j, k in itertools.product(range(2), range(3), range(2), range(3), range(4)):
        assert out[n, c, i, j, k] == x[n, c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2, 2 * k : 2 * k + 2].max()


def test_maxpool_ties_go_to_first():
    x = leaf(np.ones((1, 1, 4, 4, 4)))
    out = ad.maxpool(x)
    assert np.array_equal(out.data, np.ones((1, 1, 2, 2, 2)))
    ad.backward(ad.sum_all(out))
    expected = np.zeros((4, 4, 4))
    expected[::2, ::2, ::2] = 1
    assert np.array_equal(x.grad[0, 0], expected)


def test_maxpool_gradient():
    rng = make_rng(12)
    # distinct values separated well beyond the FD step
    v = rng.permutation(2 * 2 * 4 * 4 * 4).reshape(2, 2, 4, 4, 4) * 0.01
    x = leaf(v)
    r = rng.standard_normal((2, 2, 2, 2, 2))
    assert_grads(lambda: projected(ad.maxpool(x), r), [x], rng, samples=30, rtol=1e-6)


# -------------------------------------------------------------- upsample


def test_upsample_constant():
    x = np.full((1, 2, 3, 4, 5), 1.7)
    assert np.array_equal(ad.upsample(x).data, np.full((1, 2, 6, 8, 10), 1.7))


def test_upsample_ramp():
    out = ad.upsample(np.array([[[0.0, 1.0]]])).data[0, 0]
    assert np.allclose(out, [0, 0.25, 0.75, 1])


def brute_upsample_weights(n):
    """Weight matrix of 1D x2 half-pixel linear interpolation with border clamping."""
    m = np.zeros((2 * n, n))
    for i in range(2 * n):
        src = min(max((i + 0.5) / 2 - 0.5, 0), n - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n - 1)
        f = src - lo
        m[i, lo] += 1 - f
        m[i, hi] += f
    return m


@pytest.mark.parametrize("n", [1, 2, 3, 7])
def test_upsample_matches_weight_enumeration(n):
    x = make_rng(n).standard_normal(n)
    assert np.allclose(ad.upsample(x[None, None]).data[0, 0], brute_upsample_weights(n) @ x, atol=1e-14)


def test_upsample_separable_3d():
    x = make_rng(13).standard_normal((1, 1, 3, 4, 2))
    mz, my, mx = (brute_upsample_weights(n) for n in (3, 4, 2))
    expected = np.einsum("ai,bj,ck,ijk->abc", mz, my, mx, x[0, 0])
    assert np.allclose(ad.upsample(x).data[0, 0], expected, atol=1e-13)


@settings(max_examples=20, deadline=None)
@given(st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)), st.integers(0, 2**32))
def test_upsample_adjoint(shape, seed):
    rng = make_rng(seed)
    x = leaf(rng.standard_normal((1, 2) + shape))
    y = rng.standard_normal((1, 2) + tuple(2 * s for s in shape))
    out = ad.upsample(x)
    ad.backward(projected(out, y))
    lhs = np.vdot(out.data, y)
    assert abs(lhs - np.vdot(x.data, x.grad)) <= 1e-10 * (abs(lhs) + 1e-30) + 1e-12


def test_upsample_gradient_2d():
    rng = make_rng(14)
    x = leaf(rng.standard_normal((2, 2, 3, 5)))
    r = rng.standard_normal((2, 2, 6, 10))
    assert_grads(lambda: projected(ad.upsample(x), r), [x], rng, samples=20)


# -------------------------------------------------- concat, add, loss, graph


def test_concat_add_gradients():
    rng = make_rng(15)
    a = leaf(rng.standard_normal((2, 1, 3, 3)))
    b = leaf(rng.standard_normal((2, 2, 3, 3)))
    c = leaf(rng.standard_normal((2, 3, 3, 3)))
    r = rng.standard_normal((2, 3, 3, 3))
    assert_grads(lambda: projected(ad.add(ad.concat_channels(a, b), c), r), [a, b, c], rng)
    assert ad.concat_channels(a, b).shape == (2, 3, 3, 3)


def test_shape_errors():
    with pytest.raises(ValueError):
        ad.concat_channels(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))
    with pytest.raises(ValueError):
        ad.add(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        ad.l1_loss(np.zeros(3), np.zeros(4))


def test_l1_values():
    assert float(ad.l1_loss(np.array([1.0, 2.0]), np.array([0.0, 0.0])).data) == 1.5
    x = make_rng(0).standard_normal(5)
    assert float(ad.l1_loss(x, x).data) == 0.0


def test_l1_gradient():
    rng = make_rng(16)
    p = leaf(rng.standard_normal((3, 4)))
    t = rng.standard_normal((3, 4))
    ad.backward(ad.l1_loss(p, Tensor(t)))
    assert np.array_equal(p.grad, np.sign(p.data - t) / 12)
    assert_grads(lambda: ad.l1_loss(p, Tensor(t)), [p], rng)
    q = leaf(t.copy())
    ad.backward(ad.l1_loss(q, Tensor(t)))
    assert not q.grad.any()


def test_backward_sum_and_accumulation():
    x = leaf(np.arange(6.0).reshape(2, 3))
    ad.backward(ad.sum_all(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))
    ad.backward(ad.sum_all(x))
    assert np.array_equal(x.grad, 2 * np.ones((2, 3)))


def test_backward_diamond_graph():
    x = leaf([1.0, -2.0, 3.0])
    y = ad.mul(x, x)
    z = ad.add(y, x)
    ad.backward(ad.sum_all(ad.add(z, y)))
    assert np.allclose(x.grad, 4 * x.data + 1)


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        ad.backward(leaf([1.0, 2.0]))


def test_forward_is_deterministic():
    rng = make_rng(17)
    x = rng.standard_normal((1, 3, 6, 6, 6)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3, 3)).astype(np.float32)
    a = ad.upsample(ad.maxpool(ad.conv(x, w))).data
    b = ad.upsample(ad.maxpool(ad.conv(x, w))).data
    assert a.tobytes() == b.tobytes()
