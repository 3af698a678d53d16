"""Parameter initialization helpers.

All weights use uniform(-b, b) with b = sqrt(1 / fan_in); biases start at zero.
"""
from __future__ import annotations

import math

import numpy as np

from . import config


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(config.default_dtype())


def linear_init(rng: np.random.Generator, d_in: int, d_out: int):
    """Weight (d_in, d_out) and zero bias (d_out,)."""
    w = uniform_fan_in(rng, (d_in, d_out), d_in)
    b = np.zeros(d_out, dtype=config.default_dtype())
    return w, b


def conv_init(rng: np.random.Generator, c_out: int, c_in: int, k: int):
    """Conv weight (O, I, K, K) and zero bias (O,)."""
    w = uniform_fan_in(rng, (c_out, c_in, k, k), c_in * k * k)
    b = np.zeros(c_out, dtype=config.default_dtype())
    return w, b


def conv_transpose_init(rng: np.random.Generator, c_in: int, c_out: int, k: int):
    """Transposed-conv weight (I, O, K, K) and zero bias (O,).

    fan_in counts the contributing inputs per output: c_in * k * k / stride^2
    collapses to c_in for the k == stride case used here; use c_in * k * k to
    stay conservative.
    """
    w = uniform_fan_in(rng, (c_in, c_out, k, k), c_in * k * k)
    b = np.zeros(c_out, dtype=config.default_dtype())
    return w, b
