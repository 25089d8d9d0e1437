import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deskdiff import kernels as K
from deskdiff.kernels import Tensor


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oi]
                    for ci in range(c):
                        for a in range(kh):
                            for bb in range(kw):
                                acc += xp[ni, ci, i * stride + a, j * stride + bb] * w[oi, ci, a, bb]
                    out[ni, oi, i, j] = acc
    return out


def naive_attention(q, k, v, heads):
    L, D = q.shape
    dh = D // heads
    out = np.zeros((L, D))
    for hd in range(heads):
        sl = slice(hd * dh, (hd + 1) * dh)
        for i in range(L):
            s = np.array([q[i, sl] @ k[j, sl] / np.sqrt(dh) for j in range(len(k))])
            p = np.exp(s - s.max())
            p /= p.sum()
            out[i, sl] = sum(p[j] * v[j, sl] for j in range(len(k)))
    return out


def test_conv_identity_kernel():
    x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
    y = K.conv2d(x, np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32))
    assert np.array_equal(y.data, x)


def test_conv_channel_sum():
    y = K.conv2d(np.ones((1, 2, 2, 2), np.float32), np.ones((1, 2, 1, 1), np.float32))
    assert np.all(y.data == 2.0)


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    y = K.conv2d(x, w, b, pad=1)
    assert y.shape == (1, 4, 8, 8)
    np.testing.assert_allclose(y.data, naive_conv(x, w, b, 1, 1), atol=1e-5)


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 2), c=st.integers(1, 3), o=st.integers(1, 3), h=st.integers(3, 7), w=st.integers(3, 7),
       k=st.sampled_from([1, 3]), stride=st.integers(1, 2), pad=st.integers(0, 2), seed=st.integers(0, 2**16))
def test_conv_random_cases(n, c, o, h, w, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c, h, w)).astype(np.float32)
    ker = rng.standard_normal((o, c, k, k)).astype(np.float32)
    b = rng.standard_normal(o).astype(np.float32)
    y = K.conv2d(x, ker, b, stride=stride, pad=pad)
    assert y.shape[2] == (h + 2 * pad - k) // stride + 1
    np.testing.assert_allclose(y.data, naive_conv(x, ker, b, stride, pad), atol=1e-5)


@pytest.mark.parametrize("xs, ws, kw", [
    ((1, 2, 4, 4), (1, 3, 3, 3), {}),       # channel mismatch
    ((1, 2, 4, 4), (1, 2, 2, 2), {}),       # even kernel
    ((1, 2, 4, 4), (1, 2, 3, 3), {"stride": 0}),
    ((2, 4, 4), (1, 2, 3, 3), {}),          # wrong rank
])
def test_conv_rejects_bad_shapes(xs, ws, kw):
    with pytest.raises(K.ShapeError):
        K.conv2d(np.zeros(xs, np.float32), np.zeros(ws, np.float32), **kw)


def test_group_norm_constant_and_affine():
    x = np.full((2, 4, 3, 3), 7.0, np.float32)
    y = K.group_norm(x, 2, np.ones(4, np.float32), np.zeros(4, np.float32))
    assert np.all(y.data == 0)
    rng = np.random.default_rng(1)
    y = K.group_norm(rng.standard_normal((2, 4, 3, 3)), 2, np.zeros(4), np.full(4, 5.0))
    assert np.all(y.data == 5.0)


def test_group_norm_moments():
    rng = np.random.default_rng(2)
    x = (3 * rng.standard_normal((3, 6, 5, 5)) + 2).astype(np.float32)
    y = K.group_norm(x, 2, np.ones(6, np.float32), np.zeros(6, np.float32), eps=1e-5).data
    g = y.reshape(3, 2, -1).astype(np.float64)
    assert np.abs(g.mean(-1)).max() <= 1e-5
    assert np.abs(g.var(-1) - 1).max() <= 1e-3


def test_group_norm_rejects_indivisible():
    with pytest.raises(K.ShapeError):
        K.group_norm(np.zeros((1, 6, 2, 2)), 4, np.ones(6), np.zeros(6))


def test_attention_single_key():
    rng = np.random.default_rng(3)
    q = rng.standard_normal((5, 8))
    v = rng.standard_normal((1, 8))
    y = K.attention(q, rng.standard_normal((1, 8)), v, heads=2)
    np.testing.assert_allclose(y.data, np.repeat(v, 5, axis=0), atol=1e-12)


def test_attention_hard_limit():
    k = np.eye(4, 8) * 1.0
    v = np.random.default_rng(4).standard_normal((4, 8))
    q = np.zeros((1, 8))
    q[0, 2] = 1000.0
    y = K.attention(q, k, v, heads=1)
    np.testing.assert_allclose(y.data[0], v[2], atol=1e-3)


def test_attention_matches_naive_oracle():
    rng = np.random.default_rng(5)
    q, k, v = (rng.standard_normal(s).astype(np.float32) for s in ((3, 8), (4, 8), (4, 8)))
    y, p = K.attention(q, k, v, heads=2, return_weights=True)
    np.testing.assert_allclose(y.data, naive_attention(q, k, v, 2), atol=1e-5)
    assert np.abs(p.sum(-1) - 1).max() <= 1e-6


def test_attention_rejects_bad_heads():
    with pytest.raises(K.ShapeError):
        K.attention(np.zeros((2, 6)), np.zeros((2, 6)), np.zeros((2, 6)), heads=4)


def test_kernels_are_deterministic():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 8, 6, 6)).astype(np.float32)
    w = rng.standard_normal((8, 8, 3, 3)).astype(np.float32)
    a = K.group_norm(K.conv2d(x, w, pad=1), 4, np.ones(8), np.zeros(8))
    b = K.group_norm(K.conv2d(x, w, pad=1), 4, np.ones(8), np.zeros(8))
    assert np.array_equal(a.data, b.data)


def test_float32_storage_preserved():
    x = np.ones((1, 2, 3, 3), np.float32)
    assert K.conv2d(x, np.ones((2, 2, 3, 3), np.float32), pad=1).dtype == np.float32
    assert K.silu(x).dtype == np.float32


def test_mac_counter():
    with K.count_macs() as mc:
        K.conv2d(np.zeros((2, 3, 5, 5), np.float32), np.zeros((4, 3, 3, 3), np.float32), pad=1)
        K.linear(np.zeros((7, 5)), np.zeros((5, 6)))
    assert mc.by_op["conv2d"] == 2 * 25 * 4 * 27
    assert mc.by_op["linear"] == 7 * 5 * 6


# -- gradients -----------------------------------------------------------------


def fd_check(fn, inputs, probes=100, h=1e-3, seed=0):
    """Central differences on ``probes`` random elements of each input (float64)."""
    rng = np.random.default_rng(seed)
    params = [K.parameter(a) for a in inputs]
    for p, a in zip(params, inputs):
        p.data = np.asarray(a, dtype=np.float64).copy()
    out = fn(*params)
    out.backward()
    grads = [p.grad.copy() for p in params]
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        idx = rng.choice(flat.size, size=min(probes, flat.size), replace=False)
        num = np.empty(len(idx))
        with K.no_grad():
            for j, i in enumerate(idx):
                old = flat[i]
                flat[i] = old + h
                fp = float(fn(*params).data)
                flat[i] = old - h
                fm = float(fn(*params).data)
                flat[i] = old
                num[j] = (fp - fm) / (2 * h)
        ana = g.reshape(-1)[idx]
        scale = np.maximum(np.abs(num), np.abs(ana)).max() + 1e-12
        assert np.abs(num - ana).max() / scale <= 1e-2


def _proj(shape, seed=9):
    return np.random.default_rng(seed).standard_normal(shape)


def loss_of(y):
    w = _proj(y.shape)
    return K.mse(K.mul(y, w), np.zeros(y.shape))


def test_grad_conv():
    rng = np.random.default_rng(10)
    fd_check(lambda x, w, b: loss_of(K.conv2d(x, w, b, stride=2, pad=1)),
             [rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)])


def test_grad_group_norm():
    rng = np.random.default_rng(11)
    fd_check(lambda x, g, b: loss_of(K.group_norm(x, 2, g, b)),
             [rng.standard_normal((2, 4, 3, 3)), rng.standard_normal(4), rng.standard_normal(4)])


def test_grad_attention():
    rng = np.random.default_rng(12)
    fd_check(lambda q, k, v: loss_of(K.attention(q, k, v, heads=2)),
             [rng.standard_normal((2, 5, 8)), rng.standard_normal((2, 3, 8)), rng.standard_normal((2, 3, 8))])


def test_grad_elementwise_and_linear():
    rng = np.random.default_rng(13)
    fd_check(lambda x, w, b: loss_of(K.silu(K.linear(K.sigmoid(x), w, b))),
             [rng.standard_normal((6, 5)), rng.standard_normal((5, 4)), rng.standard_normal(4)])


def test_grad_shape_ops():
    rng = np.random.default_rng(14)

    def fn(x, t):
        y = K.upsample_nearest(x, 2)
        y = K.concat([y, K.take(y, slice(0, 1), axis=1)], axis=1)
        g = K.gather_rows(t, np.array([1, 0, 1]))
        return K.weighted_sum([(1.0, loss_of(K.global_avg_pool(y))), (0.5, loss_of(K.transpose(g, (0, 2, 1))))])

    fd_check(fn, [rng.standard_normal((2, 3, 2, 2)), rng.standard_normal((2, 4, 3))])
