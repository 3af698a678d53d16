"""Constraint-conditioned generation: sample macro boxes, run the reverse
diffusion, decode, post-process, and loop a sanity checker until acceptance.
"""
from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import find_objects, label

from . import nn
from .data import (
    CircuitParams,
    DataError,
    DatasetManifest,
    HeatmapSet,
    manifest_entry_for,
    rasterize_bboxes,
    sample_layout_boxes,
    save_manifest,
    save_sample,
)
from .diffusion import (
    NoiseSchedule,
    UNetConfig,
    make_predictor,
    make_schedule,
    sample_loop,
)
from .encoding import EncoderConfig, encode_batch
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.tensor import Tensor
from .vae import VaeConfig, vae_decode, vae_encode

MIN_GAP = 0.02
FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.int8)


class GenerationError(RuntimeError):
    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class GenerationRequest:
    height: int
    width: int
    clock_period: float
    utilization: float
    macro_count: int
    seed: int = 0
    max_iterations: int = 64

    def validate(self, f: int, k: int) -> None:
        if self.height % f or self.width % f:
            raise DataError(f"H, W must be divisible by f={f}")
        if not (0.0 <= self.utilization <= 1.0):
            raise DataError("utilization outside [0,1]")
        if self.macro_count < 0 or self.macro_count > k:
            raise DataError(f"macro_count must be in 0..{k}")
        if self.max_iterations < 1:
            raise DataError("max_iterations must be >= 1")


@dataclass
class AttemptRecord:
    index: int
    reasons: list
    seconds: float


@dataclass
class GenerationReport:
    sample: HeatmapSet | None
    iterations: int
    attempts: list = field(default_factory=list)

    def rejection_histogram(self) -> dict:
        hist: dict[str, int] = {}
        for a in self.attempts:
            for r in a.reasons:
                hist[r] = hist.get(r, 0) + 1
        return hist


# ---------------------------------------------------------------------------
# macro box sampling


def sample_macro_boxes(m: int, u: float, rng, aspect_bounds=(0.5, 2.0), gap=MIN_GAP):
    """M non-overlapping normalized boxes with pairwise gap >= ``gap``.

    Same box law the toy data is drawn from; an infeasible draw surfaces as
    GenerationError so callers can retry or abort.
    """
    try:
        return sample_layout_boxes(rng, m, u, aspect_bounds=aspect_bounds, gap=gap)
    except DataError as e:
        if str(e).startswith("infeasible"):
            raise GenerationError(str(e)) from e
        raise


# ---------------------------------------------------------------------------
# post-processing and checking


def _extract_rectangles(mask: np.ndarray, height: int, width: int):
    """Component bounding boxes (normalized) of a binary mask, 4-connectivity."""
    labeled, n = label(mask, structure=FOUR_CONN)
    boxes = []
    for sl in find_objects(labeled):
        if sl is None:
            continue
        r, c = sl
        boxes.append((c.start / width, r.start / height, c.stop / width, r.stop / height))
    return boxes


def post_process(raw: np.ndarray, request: GenerationRequest, sample_id: str = "gen") -> HeatmapSet:
    """Rectify the macro channel, re-zero cell density inside macros, and floor
    or rescale the power channels so they stay consistent with density."""
    out = np.clip(np.asarray(raw, dtype=np.float32), 0.0, 1.0).copy()
    h, w = out.shape[1], out.shape[2]
    boxes = _extract_rectangles(out[1] > 0.5, h, w)
    macro = rasterize_bboxes(boxes, h, w)
    out[1] = macro
    inside = macro == 1.0
    out[0][inside] = 0.0
    for ch in (4, 5):
        plane = out[ch]
        if inside.any():
            pedestal = float(plane[inside].mean())
            plane[inside] = np.maximum(plane[inside], pedestal)
        zero_density = (~inside) & (out[0] == 0.0)
        if zero_density.any():
            peak = float(plane[zero_density].max())
            if peak > 0.05:
                plane[~inside] *= 0.05 / peak
    out = np.clip(out, 0.0, 1.0)
    params = CircuitParams(
        clock_period=request.clock_period,
        utilization=request.utilization,
        height=h,
        width=w,
        macros=boxes,
    )
    return HeatmapSet(channels=out, params=params, id=sample_id)


def _boxes_overlap(a, b) -> bool:
    return a[0] < b[2] and a[2] > b[0] and a[1] < b[3] and a[3] > b[1]


def check(
    sample: HeatmapSet,
    request: GenerationRequest,
    requested_boxes=None,
    calibration: float = 1.0,
    util_tol: float = 0.05,
    area_rel_tol: float = 0.20,
):
    """Constraint verdict: empty list means pass, else rejection reason codes."""
    reasons = []
    boxes = sample.params.macros
    if len(boxes) != request.macro_count:
        reasons.append("macro_count")
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            if _boxes_overlap(boxes[i], boxes[j]):
                reasons.append("overlap")
                break
        else:
            continue
        break
    macro = sample.channel("macro_region")
    non_macro = macro < 0.5
    if non_macro.any():
        proxy = float(sample.channel("cell_density")[non_macro].mean()) * calibration
    else:
        proxy = 0.0
    if abs(proxy - request.utilization) > util_tol:
        reasons.append("utilization")
    if requested_boxes is None:
        requested_boxes = boxes
    req_area = sum((xu - xl) * (yu - yl) for xl, yl, xu, yu in requested_boxes)
    got_area = float(macro.mean())
    if req_area > 0 and abs(got_area - req_area) > area_rel_tol * req_area:
        reasons.append("macro_area")
    elif req_area == 0 and got_area > 0:
        reasons.append("macro_area")
    if float(sample.channels.min()) < 0.0 or float(sample.channels.max()) > 1.0:
        reasons.append("range")
    return reasons


def calibrate_utilization(samples) -> float:
    """Least-squares slope mapping mean non-macro cell density to labeled u."""
    num = 0.0
    den = 0.0
    for s in samples:
        macro = s.channel("macro_region")
        outside = macro < 0.5
        if not outside.any():
            continue
        d = float(s.channel("cell_density")[outside].mean())
        num += d * s.params.utilization
        den += d * d
    if den == 0.0:
        return 1.0
    return num / den


# ---------------------------------------------------------------------------
# model bundle


@dataclass
class Models:
    vae_store: nn.ParamStore
    vae_cfg: VaeConfig
    dif_store: nn.ParamStore  # encoder + U-Net parameters
    enc_cfg: EncoderConfig
    unet_cfg: UNetConfig
    schedule: NoiseSchedule
    sampler_steps: int = 100
    guidance_scale: float = 1.0
    calibration: float = 1.0
    latent_scale: float = 1.0
    use_ema: bool = True

    def eval_stores(self):
        if self.use_ema:
            return self.vae_store.ema_store(), self.dif_store.ema_store()
        return self.vae_store, self.dif_store


def compute_latents(x: np.ndarray, vae_store, vae_cfg: VaeConfig) -> np.ndarray:
    """Posterior means of (N, 6, H, W) arrays, computed without gradients."""
    with nn.no_grad():
        return vae_encode(Tensor(x), vae_store, vae_cfg).mu.data


def save_models(models: Models, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    vmeta = {"vae_cfg": {"widths": list(models.vae_cfg.widths),
                         "d_latent": models.vae_cfg.d_latent,
                         "groups": models.vae_cfg.groups,
                         "kl_weight": models.vae_cfg.kl_weight}}
    save_checkpoint(models.vae_store, os.path.join(out_dir, "vae.ckpt"), meta=vmeta)
    u = models.unet_cfg
    e = models.enc_cfg
    s = models.schedule
    dmeta = {
        "unet_cfg": {"d_latent": u.d_latent, "base": u.base, "mults": list(u.mults),
                     "attn_levels": list(u.attn_levels), "d_attn": u.d_attn,
                     "time_dim": u.time_dim, "groups": u.groups, "k": u.k, "d_l": u.d_l},
        "enc_cfg": {"d_l": e.d_l, "k": e.k, "clock_max": e.clock_max,
                    "nonlinearity": e.nonlinearity},
        "schedule": {"T": s.T, "beta_start": float(s.beta[0]), "beta_end": float(s.beta[-1])},
        "sampler_steps": models.sampler_steps,
        "guidance_scale": models.guidance_scale,
        "calibration": models.calibration,
        "latent_scale": models.latent_scale,
    }
    save_checkpoint(models.dif_store, os.path.join(out_dir, "diffusion.ckpt"), meta=dmeta)


def load_models(model_dir: str) -> Models:
    vae_store, vmeta = load_checkpoint(os.path.join(model_dir, "vae.ckpt"))
    dif_store, dmeta = load_checkpoint(os.path.join(model_dir, "diffusion.ckpt"))
    vc = vmeta["vae_cfg"]
    vae_cfg = VaeConfig(widths=tuple(vc["widths"]), d_latent=vc["d_latent"],
                        groups=vc["groups"], kl_weight=vc["kl_weight"])
    uc = dmeta["unet_cfg"]
    unet_cfg = UNetConfig(d_latent=uc["d_latent"], base=uc["base"],
                          mults=tuple(uc["mults"]), attn_levels=tuple(uc["attn_levels"]),
                          d_attn=uc["d_attn"], time_dim=uc["time_dim"],
                          groups=uc["groups"], k=uc["k"], d_l=uc["d_l"])
    ec = dmeta["enc_cfg"]
    enc_cfg = EncoderConfig(d_l=ec["d_l"], k=ec["k"], clock_max=ec["clock_max"],
                            nonlinearity=ec["nonlinearity"])
    sc = dmeta["schedule"]
    schedule = make_schedule(sc["T"], sc["beta_start"], sc["beta_end"])
    return Models(
        vae_store=vae_store, vae_cfg=vae_cfg, dif_store=dif_store,
        enc_cfg=enc_cfg, unet_cfg=unet_cfg, schedule=schedule,
        sampler_steps=dmeta["sampler_steps"], guidance_scale=dmeta["guidance_scale"],
        calibration=dmeta["calibration"], latent_scale=dmeta["latent_scale"],
    )


# ---------------------------------------------------------------------------
# generation


def generate_one(request: GenerationRequest, models: Models, sample_id: str = "gen") -> GenerationReport:
    """Sample boxes, diffuse, decode, post-process, and check; repeat until a
    candidate passes or max_iterations is exhausted."""
    request.validate(models.vae_cfg.f, models.enc_cfg.k)
    vae_store, dif_store = models.eval_stores()
    predict = make_predictor(dif_store, models.unet_cfg)
    f = models.vae_cfg.f
    lat_shape = (1, models.vae_cfg.d_latent, request.height // f, request.width // f)
    attempts = []
    for it in range(1, request.max_iterations + 1):
        t0 = time.perf_counter()
        rng = nn.make_rng(request.seed, it)
        try:
            boxes = sample_macro_boxes(request.macro_count, request.utilization, rng)
        except GenerationError:
            # an unlucky placement draw burns one iteration, not the request
            attempts.append(AttemptRecord(it, ["infeasible_boxes"], time.perf_counter() - t0))
            continue
        params = CircuitParams(
            clock_period=request.clock_period,
            utilization=request.utilization,
            height=request.height,
            width=request.width,
            macros=boxes,
        )
        with nn.no_grad():
            emb = encode_batch([params], dif_store, models.enc_cfg).data
        z = sample_loop(
            lat_shape, emb, models.schedule, predict,
            models.sampler_steps, models.guidance_scale, rng,
        )
        z = z / np.float32(models.latent_scale)
        with nn.no_grad():
            raw = vae_decode(Tensor(z), vae_store, models.vae_cfg).data[0]
        candidate = post_process(raw, request, sample_id)
        reasons = check(candidate, request, boxes, models.calibration)
        attempts.append(AttemptRecord(it, reasons, time.perf_counter() - t0))
        if not reasons:
            return GenerationReport(sample=candidate, iterations=it, attempts=attempts)
    report = GenerationReport(sample=None, iterations=request.max_iterations, attempts=attempts)
    raise GenerationError(
        f"no accepted sample in {request.max_iterations} iterations; "
        f"rejections: {report.rejection_histogram()}",
        report=report,
    )


def _worker(args):
    request, models, sample_id = args
    try:
        rep = generate_one(request, models, sample_id)
        return (sample_id, rep, None)
    except GenerationError as e:
        return (sample_id, e.report, str(e))


def generate_dataset(
    requests,
    models: Models,
    out_dir: str,
    workers: int = 1,
    master_seed: int = 0,
) -> tuple[DatasetManifest, dict]:
    """Run generate_one per request (seed derived from master_seed + index),
    write accepted samples and a manifest, and aggregate failures."""
    os.makedirs(out_dir, exist_ok=True)
    jobs = []
    for i, req in enumerate(requests):
        seed = int(np.random.SeedSequence(master_seed, spawn_key=(i,)).generate_state(1)[0])
        jobs.append((replace(req, seed=seed), models, f"gen{i:05d}"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_worker, jobs))
    else:
        results = [_worker(j) for j in jobs]
    entries = []
    failures = []
    iterations = []
    rejection_hist: dict[str, int] = {}
    timing = []
    for sample_id, rep, err in results:
        if rep is not None:
            for r, c in rep.rejection_histogram().items():
                rejection_hist[r] = rejection_hist.get(r, 0) + c
            timing.append(sum(a.seconds for a in rep.attempts))
        if err is not None:
            failures.append({"id": sample_id, "error": err})
            continue
        iterations.append(rep.iterations)
        path = os.path.join(out_dir, f"{sample_id}.dalipd")
        save_sample(rep.sample, path)
        entries.append(manifest_entry_for(rep.sample, path, "generated"))
    manifest = DatasetManifest(entries=entries)
    save_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    report = {
        "requested": len(jobs),
        "generated": len(entries),
        "failures": failures,
        "iterations": {
            "per_sample": iterations,
            "mean": float(np.mean(iterations)) if iterations else None,
            "max": int(np.max(iterations)) if iterations else None,
        },
        "rejection_histogram": rejection_hist,
    }
    with open(os.path.join(out_dir, "generation_report.json"), "w", encoding="utf-8") as fp:
        json.dump(report, fp, indent=1, sort_keys=True)
        fp.write("\n")
    # wall-clock goes in its own file so the report is seed-deterministic
    stats = {"seconds_per_sample": timing, "total_seconds": float(sum(timing))}
    with open(os.path.join(out_dir, "generation_timing.json"), "w", encoding="utf-8") as fp:
        json.dump(stats, fp, indent=1, sort_keys=True)
        fp.write("\n")
    report["timing"] = stats
    return manifest, report
