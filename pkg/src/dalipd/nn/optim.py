"""Named parameter store with AdamW state and EMA shadow weights."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import config
from .tensor import Tensor

__all__ = ["AdamState", "ParamStore", "adamw_step", "ema_update"]


@dataclass
class AdamState:
    exp_avg: np.ndarray
    exp_avg_sq: np.ndarray
    step: int = 0


class ParamStore:
    """Ordered name -> parameter map plus per-parameter optimizer/EMA state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.opt: dict[str, AdamState] = {}
        self.ema: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        t = value if isinstance(value, Tensor) else Tensor(np.asarray(value))
        t.requires_grad = True
        self._params[name] = t
        self.opt[name] = AdamState(np.zeros_like(t.data), np.zeros_like(t.data))
        self.ema[name] = t.data.copy()
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def n_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def ema_view(self) -> dict[str, Tensor]:
        """Read-only tensors over the EMA shadows, for evaluation/sampling."""
        return {name: Tensor(arr) for name, arr in self.ema.items()}

    def ema_store(self) -> "ParamStore":
        """New store whose parameter values are the EMA shadows."""
        out = ParamStore()
        for name in self._params:
            out.add(name, self.ema[name].copy())
        return out

    def clone(self) -> "ParamStore":
        out = ParamStore()
        for name, t in self._params.items():
            out.add(name, t.data.copy())
            st = self.opt[name]
            out.opt[name] = AdamState(st.exp_avg.copy(), st.exp_avg_sq.copy(), st.step)
            out.ema[name] = self.ema[name].copy()
        return out

    def astype(self, dtype) -> "ParamStore":
        """Copy of the store with all arrays cast to ``dtype``."""
        out = ParamStore()
        for name, t in self._params.items():
            out.add(name, t.data.astype(dtype))
            st = self.opt[name]
            out.opt[name] = AdamState(
                st.exp_avg.astype(dtype), st.exp_avg_sq.astype(dtype), st.step
            )
            out.ema[name] = self.ema[name].astype(dtype)
        return out


def adamw_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """Decoupled-weight-decay Adam update with bias-corrected moments.

    Moments are always advanced, so lr=0 freezes parameters without freezing
    the optimizer state.
    """
    for name, p in store.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        st = store.opt[name]
        g = p.grad
        st.step += 1
        st.exp_avg *= beta1
        st.exp_avg += (1.0 - beta1) * g
        st.exp_avg_sq *= beta2
        st.exp_avg_sq += (1.0 - beta2) * g * g
        m_hat = st.exp_avg / (1.0 - beta1**st.step)
        v_hat = st.exp_avg_sq / (1.0 - beta2**st.step)
        p.data -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.data)
        config.ensure_finite(p.data, f"adamw_step({name})")


def ema_update(store: ParamStore, decay: float) -> None:
    """shadow <- decay * shadow + (1 - decay) * param, elementwise."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"decay must be in [0, 1], got {decay}")
    for name, p in store.items():
        shadow = store.ema[name]
        shadow *= decay
        shadow += (1.0 - decay) * p.data
