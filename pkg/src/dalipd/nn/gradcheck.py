"""Finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

import numpy as np

from . import config
from .tensor import Tensor


def grad_check(f, params, eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of scalar ``f()`` against central differences.

    ``f`` is a closure re-evaluating the forward pass on the current values of
    ``params`` (an iterable of leaf tensors). Returns the max over coordinates
    of |g_ad - g_fd| / max(1, |g_fd|). Requires float64 parameters.
    """
    params = [p for p in params]
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 parameters")
        p.grad = None
    out = f()
    if not isinstance(out, Tensor) or out.size != 1:
        raise ValueError("f must return a scalar Tensor")
    out.backward()
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]
    worst = 0.0
    with config.no_grad():
        for p, g_ad in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = g_ad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = float(f().data)
                flat[i] = orig - eps
                f_minus = float(f().data)
                flat[i] = orig
                g_fd = (f_plus - f_minus) / (2.0 * eps)
                err = abs(gflat[i] - g_fd) / max(1.0, abs(g_fd))
                if err > worst:
                    worst = err
    return worst
