"""Residual and attention building blocks shared by the VAE and the U-Net.

Parameters live in a ParamStore under dotted prefixes; forward helpers look
them up by name so checkpointing stays a flat name -> array map.
"""
from __future__ import annotations

import numpy as np

from . import nn
from .nn.tensor import Tensor


def init_conv(store, prefix, c_in, c_out, k, rng, zero=False):
    if zero:
        w = np.zeros((c_out, c_in, k, k), dtype=nn.default_dtype())
        b = np.zeros(c_out, dtype=nn.default_dtype())
    else:
        w, b = nn.init.conv_init(rng, c_out, c_in, k)
    store.add(f"{prefix}.w", w)
    store.add(f"{prefix}.b", b)


def conv(x, store, prefix, stride=1, padding=0):
    return nn.conv2d(x, store[f"{prefix}.w"], store[f"{prefix}.b"], stride, padding)


def init_conv_t(store, prefix, c_in, c_out, k, rng):
    w, b = nn.init.conv_transpose_init(rng, c_in, c_out, k)
    store.add(f"{prefix}.w", w)
    store.add(f"{prefix}.b", b)


def conv_t(x, store, prefix, stride=1, padding=0):
    return nn.conv_transpose2d(
        x, store[f"{prefix}.w"], store[f"{prefix}.b"], stride, padding
    )


def init_linear(store, prefix, d_in, d_out, rng):
    w, b = nn.init.linear_init(rng, d_in, d_out)
    store.add(f"{prefix}.w", w)
    store.add(f"{prefix}.b", b)


def linear(x, store, prefix):
    return nn.linear(x, store[f"{prefix}.w"], store[f"{prefix}.b"])


def init_group_norm(store, prefix, c):
    store.add(f"{prefix}.g", np.ones(c, dtype=nn.default_dtype()))
    store.add(f"{prefix}.b", np.zeros(c, dtype=nn.default_dtype()))


def group_norm(x, store, prefix, groups):
    return nn.group_norm(x, groups, store[f"{prefix}.g"], store[f"{prefix}.b"])


def init_res_block(store, prefix, c_in, c_out, rng, temb_dim=None):
    init_group_norm(store, f"{prefix}.gn1", c_in)
    init_conv(store, f"{prefix}.conv1", c_in, c_out, 3, rng)
    if temb_dim is not None:
        init_linear(store, f"{prefix}.temb", temb_dim, c_out, rng)
    init_group_norm(store, f"{prefix}.gn2", c_out)
    init_conv(store, f"{prefix}.conv2", c_out, c_out, 3, rng)
    if c_in != c_out:
        init_conv(store, f"{prefix}.skip", c_in, c_out, 1, rng)


def res_block(x: Tensor, store, prefix, groups, temb: Tensor | None = None) -> Tensor:
    h = group_norm(x, store, f"{prefix}.gn1", groups).silu()
    h = conv(h, store, f"{prefix}.conv1", padding=1)
    if temb is not None:
        t = linear(temb.silu(), store, f"{prefix}.temb")
        h = h + t.reshape(t.shape[0], t.shape[1], 1, 1)
    h = group_norm(h, store, f"{prefix}.gn2", groups).silu()
    h = conv(h, store, f"{prefix}.conv2", padding=1)
    if f"{prefix}.skip.w" in store:
        x = conv(x, store, f"{prefix}.skip")
    return x + h
