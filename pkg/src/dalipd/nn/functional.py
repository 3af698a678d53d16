"""Neural-network ops built on the autodiff Tensor: convolutions, pooling,
upsampling, softmax, group normalization.

Convolutions run as im2col + one BLAS matmul; the transposed convolution is
the exact adjoint of ``conv2d`` (its forward equals conv2d's backward pass
with respect to the input, sharing the OIKK weight layout).
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, _as_tensor, make_op, max_detached

__all__ = [
    "conv2d",
    "conv_transpose2d",
    "avg_pool2d",
    "upsample_nearest",
    "softmax",
    "group_norm",
    "linear",
]


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """(N,C,H,W) -> (N*OH*OW, C*KH*KW) patch matrix plus output extents."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[2], x.shape[3]
    if kh > hp or kw > wp:
        raise ValueError(f"kernel ({kh}x{kw}) larger than padded input ({hp}x{wp})")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * oh * ow, c * kh * kw), oh, ow


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int, oh: int, ow: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patches back into the image."""
    n, c, h, w = x_shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    cols6 = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for u in range(kh):
        for v in range(kw):
            xp[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride] += cols6[:, :, :, :, u, v]
    if padding:
        return np.ascontiguousarray(xp[:, :, padding : padding + h, padding : padding + w])
    return xp


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OIKK weight."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIKK weight")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"channel mismatch: input has {c}, weight expects {ci}")
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(o, ci * kh * kw)
    out = cols @ wmat.T
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    parents = []

    def grad_x(g: np.ndarray) -> np.ndarray:
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, o)
        return _col2im(g2 @ wmat, x.shape, kh, kw, stride, padding, oh, ow)

    def grad_w(g: np.ndarray) -> np.ndarray:
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, o)
        return (cols.T @ g2).T.reshape(weight.shape)

    parents.append((x, grad_x))
    parents.append((weight, grad_w))
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (o,):
            raise ValueError(f"bias must have shape ({o},), got {bias.shape}")
        out = out + bias.data.reshape(1, o, 1, 1)
        parents.append((bias, lambda g: g.sum(axis=(0, 2, 3))))
    return make_op(np.ascontiguousarray(out), parents, "conv2d")


def conv_transpose2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of conv2d: maps N,O,H,W to N,I,H',W' with the same OIKK weight.

    Output spatial size is (H-1)*stride - 2*padding + K.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv_transpose2d expects NCHW input and OIKK weight")
    n, o, hi, wi = x.shape
    ow_ch = weight.shape
    if ow_ch[0] != o:
        raise ValueError(f"channel mismatch: input has {o}, weight expects {ow_ch[0]}")
    _, c, kh, kw = ow_ch
    ho = (hi - 1) * stride - 2 * padding + kh
    wo = (wi - 1) * stride - 2 * padding + kw
    if ho <= 0 or wo <= 0:
        raise ValueError("output size would be non-positive")
    wmat = weight.data.reshape(o, c * kh * kw)
    x2 = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n * hi * wi, o)
    out = _col2im(x2 @ wmat, (n, c, ho, wo), kh, kw, stride, padding, hi, wi)
    parents = []

    def grad_x(g: np.ndarray) -> np.ndarray:
        gcols, goh, gow = _im2col(g, kh, kw, stride, padding)
        gx = gcols @ wmat.T
        return np.ascontiguousarray(gx.reshape(n, goh, gow, o).transpose(0, 3, 1, 2))

    def grad_w(g: np.ndarray) -> np.ndarray:
        gcols, _, _ = _im2col(g, kh, kw, stride, padding)
        return (x2.T @ gcols).reshape(weight.shape)

    parents.append((x, grad_x))
    parents.append((weight, grad_w))
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (c,):
            raise ValueError(f"bias must have shape ({c},), got {bias.shape}")
        out = out + bias.data.reshape(1, c, 1, 1)
        parents.append((bias, lambda g: g.sum(axis=(0, 2, 3))))
    return make_op(np.ascontiguousarray(out), parents, "conv_transpose2d")


def avg_pool2d(x, k: int) -> Tensor:
    """Non-overlapping k x k average pooling; spatial dims must divide by k."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"spatial dims ({h},{w}) not divisible by pool size {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def grad_fn(g: np.ndarray) -> np.ndarray:
        g = g / (k * k)
        return np.repeat(np.repeat(g, k, axis=2), k, axis=3)

    return make_op(out, [(x, grad_fn)], "avg_pool2d")


def upsample_nearest(x, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of the two trailing spatial axes."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def grad_fn(g: np.ndarray) -> np.ndarray:
        return g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))

    return make_op(np.ascontiguousarray(out), [(x, grad_fn)], "upsample_nearest")


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``."""
    x = _as_tensor(x)
    shifted = x - max_detached(x, axis=axis, keepdims=True)
    e = shifted.exp()
    return e / e.sum(axis=axis, keepdims=True)


def group_norm(x, num_groups: int, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Group normalization over (C/G, H, W) statistics per sample and group."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    g = min(num_groups, c)
    if c % g:
        raise ValueError(f"channels ({c}) not divisible by groups ({g})")
    xg = x.reshape(n, g, c // g * h * w)
    mu = xg.mean(axis=2, keepdims=True)
    centered = xg - mu
    var = (centered * centered).mean(axis=2, keepdims=True)
    normed = centered / (var + eps).sqrt()
    normed = normed.reshape(n, c, h, w)
    gamma, beta = _as_tensor(gamma), _as_tensor(beta)
    return normed * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight (+ bias); weight is (in, out)."""
    out = _as_tensor(x) @ weight
    if bias is not None:
        out = out + bias
    return out
