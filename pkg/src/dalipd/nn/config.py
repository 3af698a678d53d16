"""Global numerics configuration: precision and finite-value checking.

Training defaults to float32 for throughput; finite-difference gradient
checks need float64, so tests flip the default (see ``precision`` context
manager). Every op validates its output for NaN/Inf unless checking is
disabled.
"""
from __future__ import annotations

import contextlib

import numpy as np

_default_dtype = np.float32
_check_finite = True
_grad_enabled = True


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf."""


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


def set_default_dtype(dtype) -> None:
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported default dtype {dt}")
    global _default_dtype
    _default_dtype = dt.type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating-point precision."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def check_finite_enabled() -> bool:
    return _check_finite


def set_check_finite(enabled: bool) -> None:
    global _check_finite
    _check_finite = bool(enabled)


def ensure_finite(data: np.ndarray, where: str) -> None:
    if _check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {where}")


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (forward passes only)."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old
