"""Six-channel convolutional VAE with a d_latent-channel reduced-resolution latent.

Encoder: stem conv, then one ResNet block + stride-2 conv per width, giving a
spatial reduction of 2^len(widths). Decoder mirrors with conv_transpose2d and
ends in a sigmoid. The ELBO is mean-squared reconstruction plus a weighted
closed-form KL to the standard normal.
"""
from __future__ import annotations

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
    init_res_block,
    res_block,
)
from .nn.tensor import Tensor

LOG_VAR_MIN = -30.0
LOG_VAR_MAX = 20.0


@dataclass
class VaeConfig:
    widths: tuple = (32, 64, 128)
    d_latent: int = 4
    groups: int = 8
    kl_weight: float = 1e-6

    @property
    def f(self) -> int:
        return 2 ** len(self.widths)


@dataclass
class VaePosterior:
    mu: Tensor
    log_var: Tensor  # clamped to [-30, 20]


@dataclass
class VaeTrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 1e-5
    ema_decay: float = 0.999
    seed: int = 0
    log_every: int = 100


def init_vae(store: nn.ParamStore, cfg: VaeConfig, rng, prefix: str = "vae") -> None:
    w = cfg.widths
    init_conv(store, f"{prefix}.stem", 6, w[0], 3, rng)
    for i, c in enumerate(w):
        init_res_block(store, f"{prefix}.enc{i}", c, c, rng)
        c_next = w[i + 1] if i + 1 < len(w) else w[-1]
        init_conv(store, f"{prefix}.down{i}", c, c_next, 3, rng)
    init_group_norm(store, f"{prefix}.enc_gn", w[-1])
    init_conv(store, f"{prefix}.to_post", w[-1], 2 * cfg.d_latent, 3, rng)

    init_conv(store, f"{prefix}.from_z", cfg.d_latent, w[-1], 3, rng)
    for i in reversed(range(len(w))):
        c = w[i]
        init_res_block(store, f"{prefix}.dec{i}", c, c, rng)
        c_next = w[i - 1] if i > 0 else w[0]
        init_conv_t(store, f"{prefix}.up{i}", c, c_next, 2, rng)
    init_group_norm(store, f"{prefix}.dec_gn", w[0])
    init_conv(store, f"{prefix}.to_out", w[0], 6, 3, rng)


def vae_encode(x: Tensor, store, cfg: VaeConfig, prefix: str = "vae") -> VaePosterior:
    n, c, h, w0 = x.shape
    f = cfg.f
    if h % f or w0 % f:
        raise ValueError(f"spatial dims {h}x{w0} not divisible by f={f}")
    h_t = conv(x, store, f"{prefix}.stem", padding=1)
    for i in range(len(cfg.widths)):
        h_t = res_block(h_t, store, f"{prefix}.enc{i}", cfg.groups)
        h_t = conv(h_t, store, f"{prefix}.down{i}", stride=2, padding=1)
    h_t = group_norm(h_t, store, f"{prefix}.enc_gn", cfg.groups).silu()
    post = conv(h_t, store, f"{prefix}.to_post", padding=1)
    mu = post[:, : cfg.d_latent]
    log_var = post[:, cfg.d_latent :].clip(LOG_VAR_MIN, LOG_VAR_MAX)
    return VaePosterior(mu=mu, log_var=log_var)


def reparameterize(post: VaePosterior, noise) -> Tensor:
    if not isinstance(noise, Tensor):
        noise = Tensor(noise)
    return post.mu + (post.log_var * 0.5).exp() * noise


def vae_decode(z: Tensor, store, cfg: VaeConfig, prefix: str = "vae") -> Tensor:
    if z.ndim != 4 or z.shape[1] != cfg.d_latent:
        raise ValueError(f"expected (N, {cfg.d_latent}, h, w) latent, got {z.shape}")
    h_t = conv(z, store, f"{prefix}.from_z", padding=1)
    for i in reversed(range(len(cfg.widths))):
        h_t = res_block(h_t, store, f"{prefix}.dec{i}", cfg.groups)
        h_t = conv_t(h_t, store, f"{prefix}.up{i}", stride=2)
    h_t = group_norm(h_t, store, f"{prefix}.dec_gn", cfg.groups).silu()
    return conv(h_t, store, f"{prefix}.to_out", padding=1).sigmoid()


def kl_divergence(post: VaePosterior) -> Tensor:
    """Closed-form KL(N(mu, exp(log_var)) || N(0, I)), summed over elements."""
    lv = post.log_var
    return 0.5 * (lv.exp() + post.mu * post.mu - 1.0 - lv).sum()


def elbo_loss(x, post: VaePosterior, x_hat: Tensor, kl_weight: float) -> Tensor:
    if not isinstance(x, Tensor):
        x = Tensor(x)
    diff = x_hat - x
    recon = (diff * diff).mean()
    return recon + kl_weight * kl_divergence(post)


def train_vae(
    x_train: np.ndarray,
    store: nn.ParamStore,
    cfg: VaeConfig,
    tcfg: VaeTrainConfig,
    prefix: str = "vae",
) -> dict:
    """AdamW training over (N, 6, H, W) arrays; returns a loss history dict."""
    if x_train.ndim != 4 or x_train.shape[0] == 0:
        raise ValueError("x_train must be a nonempty (N, 6, H, W) array")
    n = x_train.shape[0]
    batch_rng = nn.make_rng(tcfg.seed, 1)
    noise_rng = nn.make_rng(tcfg.seed, 2)
    history = {"step": [], "loss": [], "recon": [], "kl": []}
    for step in range(tcfg.steps):
        idx = batch_rng.integers(0, n, size=min(tcfg.batch_size, n))
        x = Tensor(x_train[idx])
        post = vae_encode(x, store, cfg, prefix)
        eps = noise_rng.standard_normal(post.mu.shape).astype(x_train.dtype)
        z = reparameterize(post, eps)
        x_hat = vae_decode(z, store, cfg, prefix)
        loss = elbo_loss(x, post, x_hat, cfg.kl_weight)
        store.zero_grad()
        loss.backward()
        nn.adamw_step(store, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
        nn.ema_update(store, tcfg.ema_decay)
        if step % tcfg.log_every == 0 or step == tcfg.steps - 1:
            with nn.no_grad():
                kl = float(kl_divergence(post).data)
                diff = x_hat.data - x.data
                history["step"].append(step)
                history["loss"].append(float(loss.data))
                history["recon"].append(float((diff * diff).mean()))
                history["kl"].append(kl)
    return history
