"""Structured ops against brute-force oracles: convolutions, pooling,
softmax, group norm, linear."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dalipd import nn
from dalipd.nn import Tensor, grad_check


def _t(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# -- oracles ------------------------------------------------------------------


def conv2d_loops(x, w, b=None, stride=1, padding=1):
    """Direct quadruple-loop convolution, the reference for the im2col path."""
    n, ci, h, wd = x.shape
    co, ci2, kh, kw = w.shape
    assert ci == ci2
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, co, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for oc in range(co):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[ni, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[ni, oc, i, j] = (patch * w[oc]).sum()
            if b is not None:
                out[ni, oc] += b[oc]
    return out


def conv_transpose2d_loops(x, w, b=None, stride=1, padding=0):
    """Scatter-add transposed convolution with (C_in, C_out, KH, KW) weights."""
    n, ci, h, wd = x.shape
    ci2, co, kh, kw = w.shape
    assert ci == ci2
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (wd - 1) * stride - 2 * padding + kw
    full = np.zeros((n, co, oh + 2 * padding, ow + 2 * padding), dtype=x.dtype)
    for ni in range(n):
        for ic in range(ci):
            for i in range(h):
                for j in range(wd):
                    full[ni, :, i * stride:i * stride + kh, j * stride:j * stride + kw] += (
                        x[ni, ic, i, j] * w[ic]
                    )
    out = full[:, :, padding:padding + oh, padding:padding + ow]
    if b is not None:
        out += b.reshape(1, -1, 1, 1)
    return out


# -- conv2d -------------------------------------------------------------------

CONV_CASES = [
    (1, 1, 1, 5, 5, 3, 1, 1),
    (2, 3, 4, 6, 6, 3, 1, 1),
    (1, 2, 3, 7, 5, 3, 2, 1),
    (2, 2, 2, 8, 8, 5, 2, 2),
    (1, 4, 2, 6, 6, 1, 1, 0),
    (1, 1, 2, 9, 9, 3, 3, 0),
]


@pytest.mark.parametrize("n,ci,co,h,w,k,s,p", CONV_CASES)
def test_conv2d_matches_loop_oracle(n, ci, co, h, w, k, s, p):
    rng = nn.make_rng(n * 100 + k)
    x = rng.standard_normal((n, ci, h, w))
    wt = rng.standard_normal((co, ci, k, k))
    b = rng.standard_normal(co)
    got = nn.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride=s, padding=p).data
    want = conv2d_loops(x, wt, b, stride=s, padding=p)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_conv2d_gradcheck():
    rng = nn.make_rng(1)
    x = _t(rng.standard_normal((2, 2, 5, 5)))
    w = _t(rng.standard_normal((3, 2, 3, 3)))
    b = _t(rng.standard_normal(3))
    err = grad_check(lambda: (nn.conv2d(x, w, b, stride=2, padding=1) ** 2.0).sum(),
                     [x, w, b])
    assert err < 1e-6


# -- conv_transpose2d ---------------------------------------------------------

CONVT_CASES = [
    (1, 1, 1, 3, 3, 3, 1, 0),
    (2, 3, 2, 4, 4, 2, 2, 0),
    (1, 2, 3, 3, 5, 3, 2, 1),
    (1, 4, 4, 6, 6, 4, 2, 1),
]


@pytest.mark.parametrize("n,ci,co,h,w,k,s,p", CONVT_CASES)
def test_conv_transpose2d_matches_scatter_oracle(n, ci, co, h, w, k, s, p):
    rng = nn.make_rng(n * 37 + k)
    x = rng.standard_normal((n, ci, h, w))
    wt = rng.standard_normal((ci, co, k, k))
    b = rng.standard_normal(co)
    got = nn.conv_transpose2d(Tensor(x), Tensor(wt), Tensor(b), stride=s, padding=p).data
    want = conv_transpose2d_loops(x, wt, b, stride=s, padding=p)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_conv_transpose2d_output_size():
    x = Tensor(np.zeros((1, 1, 5, 7)))
    w = Tensor(np.zeros((1, 1, 4, 4)))
    out = nn.conv_transpose2d(x, w, stride=2, padding=1)
    # (H - 1) * s - 2p + K
    assert out.shape == (1, 1, 10, 14)


def test_conv_transpose2d_single_pixel_places_kernel():
    w = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 1, 1] = 2.0
    out = nn.conv_transpose2d(Tensor(x), Tensor(w), stride=1, padding=0).data
    want = np.zeros((1, 1, 5, 5))
    want[0, 0, 1:4, 1:4] = 2.0 * w[0, 0]
    np.testing.assert_array_equal(out, want)


def test_conv_transpose_is_conv_adjoint():
    # <conv(x), u> == <x, conv_T(u)> whenever conv output size round-trips
    rng = nn.make_rng(5)
    for s, p, h in ((1, 1, 6), (2, 1, 5), (2, 0, 7)):
        x = rng.standard_normal((1, 3, h, h))
        w = rng.standard_normal((2, 3, 3, 3))
        y = nn.conv2d(Tensor(x), Tensor(w), stride=s, padding=p).data
        u = rng.standard_normal(y.shape)
        back = nn.conv_transpose2d(Tensor(u), Tensor(w), stride=s, padding=p).data
        assert back.shape == x.shape
        lhs = float((y * u).sum())
        rhs = float((x * back).sum())
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_conv_transpose2d_gradcheck():
    rng = nn.make_rng(6)
    x = _t(rng.standard_normal((1, 2, 4, 4)))
    w = _t(rng.standard_normal((2, 3, 2, 2)))
    b = _t(rng.standard_normal(3))
    err = grad_check(lambda: (nn.conv_transpose2d(x, w, b, stride=2) ** 2.0).sum(),
                     [x, w, b])
    assert err < 1e-6


# -- pooling and upsampling ---------------------------------------------------


def test_avg_pool2d_oracle():
    rng = nn.make_rng(7)
    x = rng.standard_normal((2, 3, 6, 4))
    got = nn.avg_pool2d(Tensor(x), 2).data
    want = x.reshape(2, 3, 3, 2, 2, 2).mean(axis=(3, 5))
    np.testing.assert_allclose(got, want, atol=1e-14)


def test_upsample_nearest_oracle():
    rng = nn.make_rng(8)
    x = rng.standard_normal((1, 2, 3, 3))
    got = nn.upsample_nearest(Tensor(x), 2).data
    want = x.repeat(2, axis=2).repeat(2, axis=3)
    np.testing.assert_array_equal(got, want)


def test_pool_of_upsample_is_identity():
    rng = nn.make_rng(9)
    x = rng.standard_normal((1, 1, 4, 4))
    back = nn.avg_pool2d(nn.upsample_nearest(Tensor(x), 3), 3).data
    np.testing.assert_allclose(back, x, atol=1e-15)


def test_pool_and_upsample_gradcheck():
    rng = nn.make_rng(10)
    x = _t(rng.standard_normal((1, 2, 4, 4)))
    assert grad_check(lambda: (nn.avg_pool2d(x, 2) ** 2.0).sum(), [x]) < 1e-8
    assert grad_check(lambda: (nn.upsample_nearest(x, 2) ** 2.0).sum(), [x]) < 1e-8


# -- softmax ------------------------------------------------------------------


def test_softmax_rows_sum_to_one():
    rng = nn.make_rng(11)
    x = rng.standard_normal((5, 9)) * 10
    s = nn.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
    assert (s >= 0).all()


def test_softmax_closed_form_two_logits():
    x = Tensor(np.array([[0.0, np.log(3.0)]]))
    s = nn.softmax(x, axis=-1).data
    np.testing.assert_allclose(s, [[0.25, 0.75]], atol=1e-14)


def test_softmax_shift_invariance():
    rng = nn.make_rng(12)
    x = rng.standard_normal((4, 6))
    a = nn.softmax(Tensor(x), axis=-1).data
    b = nn.softmax(Tensor(x + 123.456), axis=-1).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_softmax_large_logits_stable():
    x = Tensor(np.array([[1000.0, 1000.0, -1000.0]]))
    s = nn.softmax(x, axis=-1).data
    assert np.isfinite(s).all()
    np.testing.assert_allclose(s, [[0.5, 0.5, 0.0]], atol=1e-12)


def test_softmax_gradcheck():
    rng = nn.make_rng(13)
    x = _t(rng.standard_normal((3, 5)))
    c = Tensor(rng.standard_normal((3, 5)))
    assert grad_check(lambda: (nn.softmax(x, axis=-1) * c).sum(), [x]) < 1e-7


@settings(max_examples=30)
@given(st.integers(2, 8), st.integers(0, 2**31 - 1))
def test_softmax_argmax_preserved(n, seed):
    rng = nn.make_rng(seed)
    x = rng.standard_normal(n)
    s = nn.softmax(Tensor(x.reshape(1, -1)), axis=-1).data[0]
    assert np.argmax(s) == np.argmax(x)


# -- group norm ---------------------------------------------------------------


def group_norm_loops(x, groups, gamma, beta, eps=1e-5):
    n, c, h, w = x.shape
    out = np.empty_like(x)
    gs = c // groups
    for ni in range(n):
        for g in range(groups):
            sl = x[ni, g * gs:(g + 1) * gs]
            mu, var = sl.mean(), sl.var()
            out[ni, g * gs:(g + 1) * gs] = (sl - mu) / np.sqrt(var + eps)
    return out * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)


def test_group_norm_matches_loop_oracle():
    rng = nn.make_rng(14)
    x = rng.standard_normal((2, 6, 4, 4))
    gamma = rng.standard_normal(6)
    beta = rng.standard_normal(6)
    got = nn.group_norm(Tensor(x), 3, Tensor(gamma), Tensor(beta)).data
    want = group_norm_loops(x, 3, gamma, beta)
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_group_norm_normalizes():
    rng = nn.make_rng(15)
    x = rng.standard_normal((1, 8, 5, 5)) * 7 + 3
    out = nn.group_norm(Tensor(x), 4, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    grouped = out.reshape(1, 4, 2 * 25)
    np.testing.assert_allclose(grouped.mean(axis=-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(grouped.var(axis=-1), 1.0, atol=1e-4)


def test_group_norm_gradcheck():
    rng = nn.make_rng(16)
    x = _t(rng.standard_normal((2, 4, 3, 3)))
    gamma = _t(rng.standard_normal(4))
    beta = _t(rng.standard_normal(4))
    err = grad_check(lambda: (nn.group_norm(x, 2, gamma, beta) ** 2.0).sum(),
                     [x, gamma, beta])
    assert err < 1e-6


# -- linear -------------------------------------------------------------------


def test_linear_oracle_and_gradcheck():
    rng = nn.make_rng(17)
    x = _t(rng.standard_normal((4, 3)))
    w = _t(rng.standard_normal((3, 5)))
    b = _t(rng.standard_normal(5))
    got = nn.linear(x, w, b).data
    np.testing.assert_allclose(got, x.data @ w.data + b.data, atol=1e-13)
    assert grad_check(lambda: (nn.linear(x, w, b) ** 2.0).sum(), [x, w, b]) < 1e-7
