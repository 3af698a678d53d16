"""Downstream heatmap regression benchmark: a 4-level U-Net that predicts one
channel (IR drop or RUDY) from a task-specific channel subset, plus L1 and
hotspot-L1 scoring and a fine-tuning sweep over real-sample budgets.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .blocks import conv, conv_t, init_conv, init_conv_t
from .data import CHANNEL_NAMES, DataError, HeatmapSet
from .nn.tensor import Tensor

TASKS = {
    "ir_drop": (("cell_density", "power", "scaled_power"), "ir_drop"),
    "rudy": (("cell_density", "macro_region"), "rudy"),
}


@dataclass
class TaskSpec:
    name: str
    inputs: tuple
    target: str

    @staticmethod
    def named(name: str) -> "TaskSpec":
        if name not in TASKS:
            raise DataError(f"unknown task {name!r}; expected one of {sorted(TASKS)}")
        inputs, target = TASKS[name]
        return TaskSpec(name=name, inputs=inputs, target=target)

    def validate(self) -> None:
        for ch in self.inputs + (self.target,):
            if ch not in CHANNEL_NAMES:
                raise DataError(f"unknown channel {ch!r}")
        if len(self.inputs) == 0:
            raise DataError("task needs at least one input channel")


@dataclass
class PredictorConfig:
    conv_kernel: int = 5
    deconv_kernel: int = 5
    channels: tuple = (16, 64, 128, 512)
    lr: float = 5e-5
    batch_size: int = 64
    steps: int = 125
    weight_decay: float = 0.0
    seed: int = 0


def init_predictor(store: nn.ParamStore, cfg: PredictorConfig, task: TaskSpec, rng,
                   prefix: str = "pred") -> None:
    task.validate()
    k = cfg.conv_kernel
    kd = cfg.deconv_kernel
    c = cfg.channels
    c_in = len(task.inputs)
    init_conv(store, f"{prefix}.enc0", c_in, c[0], k, rng)
    for i in range(1, len(c)):
        init_conv(store, f"{prefix}.enc{i}", c[i - 1], c[i], k, rng)
    # decoder input widths double past the first stage because of skip concat
    dec_in = list(c[1:][::-1])
    for j in range(1, len(dec_in)):
        dec_in[j] *= 2
    for j, (cin, cout) in enumerate(zip(dec_in, c[:-1][::-1])):
        init_conv_t(store, f"{prefix}.dec{j}", cin, cout, kd, rng)
    init_conv(store, f"{prefix}.head", 2 * c[0], 1, k, rng)


def predictor_forward(x, store: nn.ParamStore, cfg: PredictorConfig,
                      prefix: str = "pred") -> Tensor:
    """(N, C_in, H, W) -> (N, 1, H, W) in (0, 1); H, W divisible by 8."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    n, _, h, w = x.shape
    if h % 8 or w % 8:
        raise DataError(f"spatial dims {h}x{w} must be divisible by 8")
    pad = cfg.conv_kernel // 2
    levels = len(cfg.channels)
    feats = [conv(x, store, f"{prefix}.enc0", padding=pad).silu()]
    for i in range(1, levels):
        feats.append(conv(feats[-1], store, f"{prefix}.enc{i}", stride=2,
                          padding=pad).silu())
    hcur = feats[-1]
    for j in range(levels - 1):
        skip = feats[levels - 2 - j]
        up = conv_t(hcur, store, f"{prefix}.dec{j}", stride=2, padding=1).silu()
        th, tw = skip.shape[2], skip.shape[3]
        up = up[:, :, :th, :tw]
        hcur = nn.concat([up, skip], axis=1)
    return conv(hcur, store, f"{prefix}.head", padding=pad).sigmoid()


def predictor_param_count(cfg: PredictorConfig, task: TaskSpec) -> int:
    """Closed-form parameter count for the declared topology."""
    k2 = cfg.conv_kernel**2
    kd2 = cfg.deconv_kernel**2
    c = cfg.channels
    total = len(task.inputs) * c[0] * k2 + c[0]
    for i in range(1, len(c)):
        total += c[i - 1] * c[i] * k2 + c[i]
    dec_in = list(c[1:][::-1])
    for j in range(1, len(dec_in)):
        dec_in[j] *= 2
    for cin, cout in zip(dec_in, c[:-1][::-1]):
        total += cin * cout * kd2 + cout
    total += 2 * c[0] * 1 * k2 + 1
    return total


def build_predictor(cfg: PredictorConfig, task: TaskSpec, seed: int | None = None):
    """ParamStore plus a bound forward callable."""
    store = nn.ParamStore()
    init_predictor(store, cfg, task, nn.make_rng(cfg.seed if seed is None else seed))

    def forward(x):
        return predictor_forward(x, store, cfg)

    return store, forward


# ---------------------------------------------------------------------------
# training and evaluation


def task_arrays(samples, task: TaskSpec):
    """Stack (N, C_in, H, W) inputs and (N, 1, H, W) targets from samples."""
    task.validate()
    if len(samples) == 0:
        raise DataError("no samples to stack")
    xs, ys = [], []
    for s in samples:
        xs.append(np.stack([s.channel(ch) for ch in task.inputs]))
        ys.append(s.channel(task.target)[None])
    return np.stack(xs), np.stack(ys)


def train_predictor(samples, task: TaskSpec, cfg: PredictorConfig,
                    store: nn.ParamStore | None = None) -> tuple[nn.ParamStore, list]:
    """Minibatch L1 training; returns the store and the per-step loss curve."""
    if store is None:
        store, _ = build_predictor(cfg, task)
    if cfg.steps == 0:
        return store, []
    x_all, y_all = task_arrays(samples, task)
    n = x_all.shape[0]
    if n == 0:
        raise DataError("no training samples")
    rng = nn.make_rng(cfg.seed, 21)
    curve = []
    for _ in range(cfg.steps):
        idx = rng.integers(0, n, size=min(cfg.batch_size, n))
        pred = predictor_forward(x_all[idx], store, cfg)
        loss = (pred - Tensor(y_all[idx])).abs().mean()
        store.zero_grad()
        loss.backward()
        nn.adamw_step(store, lr=cfg.lr, weight_decay=cfg.weight_decay)
        curve.append(float(loss.data))
    return store, curve


def evaluate_maps(preds: np.ndarray, targets: np.ndarray) -> tuple[float, float]:
    """(L1, hotspot_L1) where the hotspot mask is the top ceil(10% of pixels)
    by ground truth per sample, stable tie-break by pixel index."""
    if preds.shape != targets.shape:
        raise DataError(f"shape mismatch {preds.shape} vs {targets.shape}")
    n = preds.shape[0]
    if n == 0:
        raise DataError("empty evaluation set")
    l1s = []
    hot_l1s = []
    n_hot = math.ceil(0.10 * preds.shape[-2] * preds.shape[-1])
    for i in range(n):
        p = preds[i].reshape(-1).astype(np.float64)
        t = targets[i].reshape(-1).astype(np.float64)
        err = np.abs(p - t)
        l1s.append(err.mean())
        order = np.argsort(-t, kind="stable")[:n_hot]
        hot_l1s.append(err[order].mean())
    return float(np.mean(l1s)), float(np.mean(hot_l1s))


def evaluate_predictor(store: nn.ParamStore, task: TaskSpec, samples,
                       cfg: PredictorConfig, batch: int = 16) -> tuple[float, float]:
    x_all, y_all = task_arrays(samples, task)
    if x_all.shape[0] == 0:
        raise DataError("empty evaluation set")
    preds = []
    with nn.no_grad():
        for i in range(0, x_all.shape[0], batch):
            preds.append(predictor_forward(x_all[i : i + batch], store, cfg).data)
    return evaluate_maps(np.concatenate(preds), y_all)


def fine_tune_sweep(
    pretrained: nn.ParamStore,
    real_samples,
    eval_samples,
    sizes,
    task: TaskSpec,
    cfg: PredictorConfig,
    csv_path: str | None = None,
) -> dict:
    """Fine-tune copies of ``pretrained`` on the first n real samples (ordered
    by id) for each n in sizes; returns the curve plus the n=0 baseline."""
    ordered = sorted(real_samples, key=lambda s: s.id)
    for n in sizes:
        if n > len(ordered):
            raise DataError(f"requested {n} real samples, only {len(ordered)} available")
    baseline = evaluate_predictor(pretrained, task, eval_samples, cfg)
    curve = []
    for n in sizes:
        params = pretrained.clone()
        if n > 0:
            params, _ = train_predictor(ordered[:n], task, cfg, store=params)
        l1, hot = evaluate_predictor(params, task, eval_samples, cfg)
        curve.append({"n_real": int(n), "l1": l1, "hotspot_l1": hot})
    result = {
        "baseline": {"n_real": 0, "l1": baseline[0], "hotspot_l1": baseline[1]},
        "curve": curve,
    }
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fp:
            w = csv.writer(fp)
            w.writerow(["n_real", "l1", "hotspot_l1"])
            w.writerow([0, baseline[0], baseline[1]])
            for row in curve:
                w.writerow([row["n_real"], row["l1"], row["hotspot_l1"]])
    return result
