"""Conditioning encoder: macro boxes plus (clock, utilization) -> k x d_L matrix.

Each row j <= M is phi(b_j W_b) + phi((c, u) W_cu); padding rows use the zero
box, so they all equal phi(0) + phi((c, u) W_cu). phi defaults to SiLU and can
be set to identity for algebraic tests.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .data import CircuitParams, DataError
from .nn.tensor import Tensor, silu


@dataclass
class EncoderConfig:
    d_l: int = 64
    k: int = 64
    clock_max: float = 10.0
    nonlinearity: str = "silu"  # or "identity"

    def validate(self) -> None:
        if self.d_l <= 0 or self.k <= 0:
            raise ValueError("d_l and k must be positive")
        if self.clock_max <= 0:
            raise ValueError("clock_max must be positive")
        if self.nonlinearity not in ("silu", "identity"):
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")


@dataclass
class CircuitEmbedding:
    L: Tensor  # (k, d_l)
    k: int
    d_l: int


def init_encoder(store: nn.ParamStore, cfg: EncoderConfig, rng, prefix: str = "enc"):
    cfg.validate()
    wb = nn.init.uniform_fan_in(rng, (4, cfg.d_l), 4)
    wcu = nn.init.uniform_fan_in(rng, (2, cfg.d_l), 2)
    store.add(f"{prefix}.w_b", wb)
    store.add(f"{prefix}.w_cu", wcu)


def normalize_bboxes(boxes, height: int, width: int):
    """Pixel-coordinate boxes (x_l, y_l, x_u, y_u) -> normalized by W and H."""
    out = []
    for b in boxes:
        x_l, y_l, x_u, y_u = b
        if x_l >= x_u or y_l >= y_u:
            raise DataError(f"degenerate box {b}")
        if x_l < 0 or y_l < 0 or x_u > width or y_u > height:
            raise DataError(f"box {b} exceeds layout {width}x{height}")
        out.append((x_l / width, y_l / height, x_u / width, y_u / height))
    return out


def _phi(x: Tensor, kind: str) -> Tensor:
    return silu(x) if kind == "silu" else x


def _condition_arrays(params_list, cfg: EncoderConfig):
    n = len(params_list)
    dt = nn.default_dtype()
    boxes = np.zeros((n, cfg.k, 4), dtype=dt)
    cu = np.zeros((n, 1, 2), dtype=dt)
    for i, p in enumerate(params_list):
        if p.macro_count > cfg.k:
            raise DataError(f"{p.macro_count} macros exceed pad length k={cfg.k}")
        for j, b in enumerate(p.macros):
            boxes[i, j] = b
        cu[i, 0, 0] = min(p.clock_period / cfg.clock_max, 1.0)
        cu[i, 0, 1] = p.utilization
    return boxes, cu


def encode_batch(
    params_list, store: nn.ParamStore, cfg: EncoderConfig, prefix: str = "enc"
) -> Tensor:
    """Stacked embeddings (N, k, d_l), differentiable through W_b and W_cu."""
    boxes, cu = _condition_arrays(params_list, cfg)
    w_b = store[f"{prefix}.w_b"]
    w_cu = store[f"{prefix}.w_cu"]
    b_l = _phi(Tensor(boxes) @ w_b, cfg.nonlinearity)
    cu_l = _phi(Tensor(cu) @ w_cu, cfg.nonlinearity)
    return b_l + cu_l


def encode(
    params: CircuitParams, store: nn.ParamStore, cfg: EncoderConfig, prefix: str = "enc"
) -> CircuitEmbedding:
    L = encode_batch([params], store, cfg, prefix)[0]
    return CircuitEmbedding(L=L, k=cfg.k, d_l=cfg.d_l)
