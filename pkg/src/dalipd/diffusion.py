"""Latent-space denoising diffusion: schedule, U-Net with cross-attention,
training step, and the DDPM reverse update.

The reverse update implements
    x_{t-1} = (1/sqrt(a_t)) * (x_t - ((1 - a_t)/sqrt(1 - abar_t)) * eps_hat)
              + sigma_t * z
with sigma_t = sqrt(beta_t) and a noiseless final step. Strided sampling uses
a derived sub-schedule whose per-step alphas are ratios of the original
cumulative alpha_bar, while the model still sees the original timestep values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .blocks import (
    conv,
    conv_t,
    group_norm,
    init_conv,
    init_conv_t,
    init_group_norm,
    init_linear,
    init_res_block,
    linear,
    res_block,
)
from .encoding import EncoderConfig, encode_batch
from .nn.tensor import Tensor


class ScheduleError(ValueError):
    pass


@dataclass
class NoiseSchedule:
    """Arrays are length T; t runs 1..T and indexes position t-1."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def at(self, t):
        """(beta, alpha, alpha_bar, sigma) at timestep(s) t in 1..T."""
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ScheduleError(f"timestep outside 1..{self.T}")
        i = t - 1
        return self.beta[i], self.alpha[i], self.alpha_bar[i], self.sigma[i]


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start < 1.0 and 0.0 < beta_end < 1.0):
        raise ScheduleError("beta bounds must lie in (0,1)")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(beta)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma)


def forward_noise(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; t scalar or per-item array."""
    _, _, abar, _ = schedule.at(t)
    abar = np.asarray(abar, dtype=x0.dtype)
    if abar.ndim == 1:  # per-item t: broadcast over trailing dims
        abar = abar.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def ddpm_step(x_t: np.ndarray, t: int, eps_hat: np.ndarray, schedule: NoiseSchedule,
              z_hat: np.ndarray | None = None) -> np.ndarray:
    """One reverse step; z_hat is forced to zero at t=1."""
    if t < 1:
        raise ScheduleError(f"reverse step needs t >= 1, got {t}")
    beta, alpha, abar, sigma = schedule.at(t)
    dt = x_t.dtype
    coef = (1.0 - alpha) / math.sqrt(1.0 - abar)
    mean = (x_t - np.asarray(coef, dtype=dt) * eps_hat) / np.asarray(math.sqrt(alpha), dtype=dt)
    if t == 1 or z_hat is None:
        return mean
    return mean + np.asarray(sigma, dtype=dt) * z_hat


@dataclass
class SamplingPlan:
    """Strided reverse plan: sub-schedule row i (t=i+1) pairs with the original
    timestep fed to the model."""

    timesteps: np.ndarray  # ascending original timesteps, length = steps
    sub: NoiseSchedule


def restrict_schedule(schedule: NoiseSchedule, steps: int) -> SamplingPlan:
    if steps < 1:
        raise ScheduleError(f"sampler steps must be >= 1, got {steps}")
    if steps > schedule.T:
        raise ScheduleError(f"sampler steps {steps} exceed T={schedule.T}")
    ts = np.unique(np.round(np.linspace(1, schedule.T, steps)).astype(np.int64))
    abar = schedule.alpha_bar[ts - 1]
    prev = np.concatenate([[1.0], abar[:-1]])
    alpha = abar / prev
    beta = 1.0 - alpha
    sub = NoiseSchedule(T=len(ts), beta=beta, alpha=alpha, alpha_bar=abar,
                        sigma=np.sqrt(beta))
    return SamplingPlan(timesteps=ts, sub=sub)


# ---------------------------------------------------------------------------
# attention


def cross_attention(x_tokens, L, w_q, w_k, w_v) -> Tensor:
    """softmax(Q K^T / sqrt(d_attn)) V with Q = x W_Q, K = L W_K, V = L W_V.

    Accepts (N, F) tokens with (k, d_L) conditioning, or batched
    (B, N, F) / (B, k, d_L).
    """
    for a in (x_tokens, L, w_q, w_k, w_v):
        if not isinstance(a, Tensor):
            raise TypeError("cross_attention expects Tensor inputs")
    if x_tokens.shape[-1] != w_q.shape[0]:
        raise ValueError(
            f"token dim {x_tokens.shape[-1]} does not match W_Q rows {w_q.shape[0]}"
        )
    if L.shape[-1] != w_k.shape[0] or L.shape[-1] != w_v.shape[0]:
        raise ValueError("conditioning dim does not match W_K/W_V rows")
    if w_q.shape[1] != w_k.shape[1]:
        raise ValueError("W_Q and W_K must share d_attn")
    q = x_tokens @ w_q
    k = L @ w_k
    v = L @ w_v
    d_attn = w_q.shape[1]
    scores = (q @ k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) * (
        1.0 / math.sqrt(d_attn)
    )
    return nn.softmax(scores, axis=-1) @ v


# ---------------------------------------------------------------------------
# U-Net


@dataclass
class UNetConfig:
    d_latent: int = 4
    base: int = 32
    mults: tuple = (1, 2)
    attn_levels: tuple = (0, 1)
    d_attn: int = 64
    time_dim: int = 128
    groups: int = 8
    k: int = 64
    d_l: int = 64

    @property
    def widths(self) -> tuple:
        return tuple(self.base * m for m in self.mults)


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """Standard sin/cos position features of timestep values; dim must be even."""
    if dim % 2:
        raise ValueError("time embedding dim must be even")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    return emb.astype(nn.default_dtype())


def _init_attn(store, prefix, c, ucfg: UNetConfig, rng):
    init_group_norm(store, f"{prefix}.gn", c)
    store.add(f"{prefix}.wq", nn.init.uniform_fan_in(rng, (c, ucfg.d_attn), c))
    store.add(f"{prefix}.wk", nn.init.uniform_fan_in(rng, (ucfg.d_l, ucfg.d_attn), ucfg.d_l))
    store.add(f"{prefix}.wv", nn.init.uniform_fan_in(rng, (ucfg.d_l, ucfg.d_attn), ucfg.d_l))
    store.add(f"{prefix}.wo", nn.init.uniform_fan_in(rng, (ucfg.d_attn, c), ucfg.d_attn))


def _attn_block(x: Tensor, L: Tensor, store, prefix, ucfg: UNetConfig) -> Tensor:
    n, c, h, w = x.shape
    t = group_norm(x, store, f"{prefix}.gn", ucfg.groups)
    tokens = t.reshape(n, c, h * w).transpose(0, 2, 1)
    out = cross_attention(tokens, L, store[f"{prefix}.wq"], store[f"{prefix}.wk"],
                          store[f"{prefix}.wv"])
    out = out @ store[f"{prefix}.wo"]
    return x + out.transpose(0, 2, 1).reshape(n, c, h, w)


def _coord_planes(n: int, h: int, w: int) -> np.ndarray:
    """(n, 2, h, w) planes of pixel-center x and y in [0,1].

    Appended to the U-Net input so queries carry absolute position; without
    them the attention cannot bind a conditioning box to a location while
    x_t is still mostly noise.
    """
    dt = nn.default_dtype()
    xs = ((np.arange(w) + 0.5) / w).astype(dt)
    ys = ((np.arange(h) + 0.5) / h).astype(dt)
    planes = np.stack([np.tile(xs, (h, 1)), np.tile(ys[:, None], (1, w))])
    return np.broadcast_to(planes, (n, 2, h, w)).copy()


def init_unet(store: nn.ParamStore, ucfg: UNetConfig, rng, prefix: str = "unet") -> None:
    w = ucfg.widths
    init_linear(store, f"{prefix}.time1", ucfg.time_dim, ucfg.time_dim, rng)
    init_linear(store, f"{prefix}.time2", ucfg.time_dim, ucfg.time_dim, rng)
    init_conv(store, f"{prefix}.in", ucfg.d_latent + 2, w[0], 3, rng)
    c_prev = w[0]
    for i, c in enumerate(w):
        init_res_block(store, f"{prefix}.d{i}.res", c_prev, c, rng, temb_dim=ucfg.time_dim)
        if i in ucfg.attn_levels:
            _init_attn(store, f"{prefix}.d{i}.attn", c, ucfg, rng)
        if i < len(w) - 1:
            init_conv(store, f"{prefix}.d{i}.down", c, c, 3, rng)
        c_prev = c
    init_res_block(store, f"{prefix}.mid.res1", w[-1], w[-1], rng, temb_dim=ucfg.time_dim)
    _init_attn(store, f"{prefix}.mid.attn", w[-1], ucfg, rng)
    init_res_block(store, f"{prefix}.mid.res2", w[-1], w[-1], rng, temb_dim=ucfg.time_dim)
    for i in reversed(range(len(w))):
        init_res_block(store, f"{prefix}.u{i}.res", 2 * w[i], w[i], rng,
                       temb_dim=ucfg.time_dim)
        if i in ucfg.attn_levels:
            _init_attn(store, f"{prefix}.u{i}.attn", w[i], ucfg, rng)
        if i > 0:
            init_conv_t(store, f"{prefix}.u{i}.up", w[i], w[i - 1], 2, rng)
    init_group_norm(store, f"{prefix}.out_gn", w[0])
    init_conv(store, f"{prefix}.out", w[0], ucfg.d_latent, 3, rng, zero=True)


def predict_noise(x_t, t, embedding, store, ucfg: UNetConfig, prefix: str = "unet") -> Tensor:
    """eps_hat with the same shape as x_t; embedding None means the all-zero
    (unconditional) matrix."""
    if not isinstance(x_t, Tensor):
        x_t = Tensor(x_t)
    n = x_t.shape[0]
    if x_t.ndim != 4 or x_t.shape[1] != ucfg.d_latent:
        raise ValueError(f"expected (N, {ucfg.d_latent}, h, w) input, got {x_t.shape}")
    if embedding is None:
        embedding = Tensor(np.zeros((n, ucfg.k, ucfg.d_l), dtype=nn.default_dtype()))
    elif not isinstance(embedding, Tensor):
        embedding = Tensor(embedding)
    if embedding.ndim == 2:
        embedding = embedding.reshape(1, *embedding.shape)
    t_arr = np.broadcast_to(np.atleast_1d(np.asarray(t)), (n,))
    temb = Tensor(sinusoidal_embedding(t_arr, ucfg.time_dim))
    temb = linear(temb, store, f"{prefix}.time1").silu()
    temb = linear(temb, store, f"{prefix}.time2")

    w = ucfg.widths
    coords = Tensor(_coord_planes(n, x_t.shape[2], x_t.shape[3]))
    h = conv(nn.concat([x_t, coords], axis=1), store, f"{prefix}.in", padding=1)
    skips = []
    for i in range(len(w)):
        h = res_block(h, store, f"{prefix}.d{i}.res", ucfg.groups, temb)
        if i in ucfg.attn_levels:
            h = _attn_block(h, embedding, store, f"{prefix}.d{i}.attn", ucfg)
        skips.append(h)
        if i < len(w) - 1:
            h = conv(h, store, f"{prefix}.d{i}.down", stride=2, padding=1)
    h = res_block(h, store, f"{prefix}.mid.res1", ucfg.groups, temb)
    h = _attn_block(h, embedding, store, f"{prefix}.mid.attn", ucfg)
    h = res_block(h, store, f"{prefix}.mid.res2", ucfg.groups, temb)
    for i in reversed(range(len(w))):
        h = nn.concat([h, skips.pop()], axis=1)
        h = res_block(h, store, f"{prefix}.u{i}.res", ucfg.groups, temb)
        if i in ucfg.attn_levels:
            h = _attn_block(h, embedding, store, f"{prefix}.u{i}.attn", ucfg)
        if i > 0:
            h = conv_t(h, store, f"{prefix}.u{i}.up", stride=2)
    h = group_norm(h, store, f"{prefix}.out_gn", ucfg.groups).silu()
    return conv(h, store, f"{prefix}.out", padding=1)


# ---------------------------------------------------------------------------
# training


@dataclass
class DiffusionTrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-5
    ema_decay: float = 0.999
    cond_dropout: float = 0.1
    seed: int = 0
    log_every: int = 100


def diffusion_train_step(
    x0: np.ndarray,
    params_list,
    schedule: NoiseSchedule,
    store: nn.ParamStore,
    enc_cfg: EncoderConfig,
    ucfg: UNetConfig,
    tcfg: DiffusionTrainConfig,
    rng: np.random.Generator,
) -> dict:
    """One joint optimizer step over a latent batch; returns loss and the
    number of items whose conditioning was dropped."""
    n = x0.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    drop = rng.uniform(size=n) < tcfg.cond_dropout
    x_t = forward_noise(x0, t, eps, schedule)

    emb = encode_batch(params_list, store, enc_cfg)
    mask = (~drop).astype(x0.dtype).reshape(n, 1, 1)
    emb = emb * Tensor(mask)
    eps_hat = predict_noise(x_t, t, emb, store, ucfg)
    diff = eps_hat - Tensor(eps)
    loss = (diff * diff).mean()
    store.zero_grad()
    loss.backward()
    nn.adamw_step(store, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    nn.ema_update(store, tcfg.ema_decay)
    return {"loss": float(loss.data), "n_dropped": int(drop.sum())}


def train_diffusion(
    latents: np.ndarray,
    params_list,
    schedule: NoiseSchedule,
    store: nn.ParamStore,
    enc_cfg: EncoderConfig,
    ucfg: UNetConfig,
    tcfg: DiffusionTrainConfig,
) -> dict:
    if latents.shape[0] == 0 or latents.shape[0] != len(params_list):
        raise ValueError("latents and params_list must align and be nonempty")
    n = latents.shape[0]
    batch_rng = nn.make_rng(tcfg.seed, 11)
    step_rng = nn.make_rng(tcfg.seed, 12)
    history = {"step": [], "loss": [], "n_dropped": 0}
    for step in range(tcfg.steps):
        idx = batch_rng.integers(0, n, size=min(tcfg.batch_size, n))
        stats = diffusion_train_step(
            latents[idx], [params_list[i] for i in idx], schedule, store,
            enc_cfg, ucfg, tcfg, step_rng,
        )
        history["n_dropped"] += stats["n_dropped"]
        if step % tcfg.log_every == 0 or step == tcfg.steps - 1:
            history["step"].append(step)
            history["loss"].append(stats["loss"])
    return history


# ---------------------------------------------------------------------------
# sampling


def make_predictor(store: nn.ParamStore, ucfg: UNetConfig, prefix: str = "unet"):
    """Bind the U-Net into a (x_t, t, embedding) -> eps_hat array callable."""

    def predict(x_t, t, embedding):
        with nn.no_grad():
            return predict_noise(x_t, t, embedding, store, ucfg, prefix).data

    return predict


def sample_loop(
    shape,
    embedding,
    schedule: NoiseSchedule,
    predict_fn,
    sampler_steps: int,
    guidance_scale: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Reverse diffusion from pure noise.

    predict_fn(x_t, t, embedding_or_None) -> eps_hat array. Guidance blends
    eps_u + s (eps_c - eps_u); s == 1.0 short-circuits to the conditional
    prediction so it is bit-identical to no-guidance sampling.
    """
    plan = restrict_schedule(schedule, sampler_steps)
    steps = plan.sub.T
    dt = nn.default_dtype()
    x = rng.standard_normal(shape).astype(dt)
    for i in range(steps, 0, -1):
        t_orig = int(plan.timesteps[i - 1])
        if guidance_scale == 1.0:
            eps = np.asarray(predict_fn(x, t_orig, embedding))
        else:
            eps_c = np.asarray(predict_fn(x, t_orig, embedding))
            eps_u = np.asarray(predict_fn(x, t_orig, None))
            eps = eps_u + guidance_scale * (eps_c - eps_u)
        z = rng.standard_normal(shape).astype(dt) if i > 1 else None
        x = ddpm_step(x, i, eps, plan.sub, z)
    return x
