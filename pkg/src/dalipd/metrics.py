"""Statistical comparison suite: feature-space Frechet distance, SSIM, L1,
hotspot fractions, pooled histograms, pairwise-SSIM diversity, feature export.

The Frechet distance runs over a pluggable feature extractor;
``default_features`` is a deterministic 84-dim stand-in (8x8 block means,
16-bin histogram, mean/std/hot/low), so scores are comparable within this
artifact only, not against published scores computed on Inception-v3
activations.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np

SHRINKAGE = 1e-3
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 1.0) ** 2
SSIM_C2 = (0.03 * 1.0) ** 2


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# features and Frechet distance


def default_features(channel: np.ndarray) -> np.ndarray:
    """84-dim deterministic descriptor of one H x W map."""
    x = np.asarray(channel, dtype=np.float64)
    if x.ndim != 2 or x.size == 0:
        raise MetricError(f"expected a nonempty 2-D map, got shape {x.shape}")
    blocks = [
        col.mean()
        for row in np.array_split(x, 8, axis=0)
        for col in np.array_split(row, 8, axis=1)
    ]
    hist, _ = np.histogram(x, bins=16, range=(0.0, 1.0))
    hist = hist / x.size
    hot = float((x > 0.9).mean())
    low = float((x < 0.1).mean())
    return np.concatenate([blocks, hist, [x.mean(), x.std(), hot, low]])


@dataclass
class GaussianSummary:
    mu: np.ndarray
    sigma: np.ndarray

    def validate(self) -> None:
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-10):
            raise MetricError("covariance not symmetric within 1e-10")
        w = np.linalg.eigvalsh(0.5 * (self.sigma + self.sigma.T))
        if w.min() < -1e-8:
            raise MetricError(f"covariance has eigenvalue {w.min()} < -1e-8")


def fit_gaussian(features: np.ndarray, shrinkage: float | None = None) -> GaussianSummary:
    """Mean/covariance of (n, d) feature rows; shrinkage (1-l)S + lI applied
    automatically when n < d + 1."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] == 0:
        raise MetricError("need a nonempty (n, d) feature matrix")
    n, d = f.shape
    mu = f.mean(axis=0)
    if n == 1:
        sigma = np.zeros((d, d))
    else:
        sigma = np.cov(f, rowvar=False, ddof=1)
    if shrinkage is None:
        shrinkage = SHRINKAGE if n < d + 1 else 0.0
    if shrinkage > 0.0:
        sigma = (1.0 - shrinkage) * sigma + shrinkage * np.eye(d)
    return GaussianSummary(mu=mu, sigma=sigma)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(a: GaussianSummary, b: GaussianSummary) -> float:
    a.validate()
    b.validate()
    diff = a.mu - b.mu
    sa_half = _psd_sqrt(a.sigma)
    inner = sa_half @ b.sigma @ sa_half
    w = np.clip(np.linalg.eigvalsh(0.5 * (inner + inner.T)), 0.0, None)
    tr_sqrt = np.sqrt(w).sum()
    val = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_sqrt)
    return max(val, 0.0)


def fid(set_a, set_b, extractor=default_features) -> float:
    if len(set_a) == 0 or len(set_b) == 0:
        raise MetricError("fid requires nonempty sets")
    fa = np.stack([extractor(m) for m in set_a])
    fb = np.stack([extractor(m) for m in set_b])
    return frechet_distance(fit_gaussian(fa), fit_gaussian(fb))


# ---------------------------------------------------------------------------
# SSIM


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


_KERNEL = _gaussian_kernel()
_KFLAT = _KERNEL.reshape(-1)


def _windows(x: np.ndarray) -> np.ndarray:
    """(n_windows, 121) view of all valid 11x11 patches."""
    v = np.lib.stride_tricks.sliding_window_view(x, (SSIM_WINDOW, SSIM_WINDOW))
    return v.reshape(-1, SSIM_WINDOW * SSIM_WINDOW)


def _ssim_from_stats(mu_x, mu_y, var_x, var_y, cov):
    num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return num / den


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    """Single-scale SSIM, Gaussian 11x11 window, valid positions only.

    Maps smaller than the window fall back to global statistics and raise a
    RuntimeWarning.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim != 2:
        raise MetricError("ssim expects 2-D maps")
    if min(x.shape) < SSIM_WINDOW:
        warnings.warn("map smaller than SSIM window; using global statistics",
                      RuntimeWarning, stacklevel=2)
        mu_x, mu_y = x.mean(), y.mean()
        var_x, var_y = x.var(), y.var()
        cov = ((x - mu_x) * (y - mu_y)).mean()
        return float(_ssim_from_stats(mu_x, mu_y, var_x, var_y, cov))
    wx = _windows(x)
    wy = _windows(y)
    mu_x = wx @ _KFLAT
    mu_y = wy @ _KFLAT
    ex2 = (wx * wx) @ _KFLAT
    ey2 = (wy * wy) @ _KFLAT
    exy = (wx * wy) @ _KFLAT
    var_x = ex2 - mu_x**2
    var_y = ey2 - mu_y**2
    cov = exy - mu_x * mu_y
    return float(_ssim_from_stats(mu_x, mu_y, var_x, var_y, cov).mean())


def l1_map(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {y.shape}")
    return float(np.abs(x - y).mean())


def hotspot_fraction(channel: np.ndarray, hi_threshold: float = 0.9,
                     lo_threshold: float = 0.1) -> tuple[float, float]:
    """(fraction > hi, fraction < lo), strict inequalities."""
    x = np.asarray(channel)
    return float((x > hi_threshold).mean()), float((x < lo_threshold).mean())


# ---------------------------------------------------------------------------
# set-level statistics


def pairwise_ssim(maps) -> dict:
    """SSIM over all unordered pairs; 20-bin histogram over [0,1] (values
    clipped into range), average, stdv, and the exact pair count."""
    n = len(maps)
    if n < 2:
        raise MetricError("pairwise_ssim needs at least 2 maps")
    arrs = [np.asarray(m, dtype=np.float64) for m in maps]
    small = min(arrs[0].shape) < SSIM_WINDOW
    stats = []
    if not small:
        for a in arrs:
            w = _windows(a)
            mu = w @ _KFLAT
            var = (w * w) @ _KFLAT - mu**2
            stats.append((w, mu, var))
    vals = np.empty(n * (n - 1) // 2)
    idx = 0
    for i in range(n):
        for j in range(i + 1, n):
            if small:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    vals[idx] = ssim(arrs[i], arrs[j])
            else:
                wi, mx, vx = stats[i]
                wj, my, vy = stats[j]
                cov = (wi * wj) @ _KFLAT - mx * my
                vals[idx] = _ssim_from_stats(mx, my, vx, vy, cov).mean()
            idx += 1
    hist, edges = np.histogram(np.clip(vals, 0.0, 1.0), bins=20, range=(0.0, 1.0))
    return {
        "n_pairs": int(idx),
        "avg": float(vals.mean()),
        "stdv": float(vals.std()),
        "histogram": hist.tolist(),
        "bin_edges": edges.tolist(),
    }


def histogram_stats(maps, bins: int = 16) -> dict:
    """Pooled pixel histogram over [0,1] plus pooled mean and stdv."""
    if len(maps) == 0:
        raise MetricError("histogram_stats needs at least one map")
    pooled = np.concatenate([np.asarray(m, dtype=np.float64).reshape(-1) for m in maps])
    counts, edges = np.histogram(pooled, bins=bins, range=(0.0, 1.0))
    return {
        "counts": counts.tolist(),
        "frequencies": (counts / pooled.size).tolist(),
        "bin_edges": edges.tolist(),
        "mean": float(pooled.mean()),
        "stdv": float(pooled.std()),
    }


# ---------------------------------------------------------------------------
# feature export

FEATURE_CHANNELS = ("rudy", "ir_drop", "power", "scaled_power")
FEATURE_COLUMNS = tuple(
    f"{ch}_{stat}" for ch in FEATURE_CHANNELS for stat in ("avg", "stdv", "hotspot")
) + ("aspect_ratio",)


def export_features(samples, path: str | None = None) -> list[dict]:
    """Per-sample stat rows (13 columns); optionally written as CSV."""
    rows = []
    for s in samples:
        row = {}
        for ch in FEATURE_CHANNELS:
            plane = s.channel(ch)
            row[f"{ch}_avg"] = float(plane.mean())
            row[f"{ch}_stdv"] = float(plane.std())
            row[f"{ch}_hotspot"] = hotspot_fraction(plane)[0]
        row["aspect_ratio"] = s.params.height / s.params.width
        rows.append(row)
    if path is not None:
        with open(path, "w", newline="", encoding="utf-8") as fp:
            writer = csv.DictWriter(fp, fieldnames=FEATURE_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
    return rows
