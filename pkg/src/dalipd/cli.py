"""Command-line front end wiring the library together: dataset tools,
training, generation, evaluation, and the downstream benchmark.

Configuration is a JSON file with five sections (vae, diffusion, pipeline,
metrics, downstream) plus seed, precision, and default paths.  Any value can
be overridden from the environment as DALI_<SECTION>_<KEY>, e.g.
DALI_VAE_STEPS=500 or DALI_SEED=7.  Unknown keys are rejected.  Every command
that produces files writes the fully resolved config next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import (
    CHANNEL_NAMES,
    DataError,
    DatasetManifest,
    augment,
    load_manifest,
    load_samples,
    make_toy_dataset,
    make_toy_sample,
    manifest_entry_for,
    save_manifest,
    save_sample,
    split_dataset,
)
from .diffusion import (
    DiffusionTrainConfig,
    ScheduleError,
    UNetConfig,
    init_unet,
    make_schedule,
    train_diffusion,
)
from .downstream import (
    PredictorConfig,
    TaskSpec,
    evaluate_predictor,
    fine_tune_sweep,
    train_predictor,
)
from .encoding import EncoderConfig, init_encoder
from .metrics import (
    MetricError,
    export_features,
    fid,
    histogram_stats,
    hotspot_fraction,
    l1_map,
    pairwise_ssim,
    ssim,
)
from .nn import CheckpointError, load_checkpoint, save_checkpoint
from .pipeline import (
    GenerationError,
    GenerationRequest,
    Models,
    calibrate_utilization,
    compute_latents,
    generate_dataset,
    load_models,
    save_models,
)
from .vae import VaeConfig, VaeTrainConfig, init_vae, train_vae

VERSION = "0.1.0"
FORMAT_LINE = "dali %s (formats: DALIPD01, DALI-CKPT1)" % VERSION


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class PathsSection:
    datasets: str = "data"
    checkpoints: str = "runs"
    reports: str = "reports"


@dataclass
class VaeSection:
    widths: tuple = (32, 64, 128)
    d_latent: int = 4
    groups: int = 8
    kl_weight: float = 1e-6
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 1e-5
    ema_decay: float = 0.999
    log_every: int = 100


@dataclass
class DiffusionSection:
    base: int = 32
    mults: tuple = (1, 2)
    attn_levels: tuple = (0, 1)
    d_attn: int = 64
    time_dim: int = 128
    groups: int = 8
    k: int = 64
    d_l: int = 64
    clock_max: float = 10.0
    nonlinearity: str = "silu"
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sampler_steps: int = 100
    guidance_scale: float = 1.0
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-5
    ema_decay: float = 0.999
    cond_dropout: float = 0.1
    log_every: int = 100


@dataclass
class PipelineSection:
    max_iterations: int = 64


@dataclass
class MetricsSection:
    hist_bins: int = 16


@dataclass
class DownstreamSection:
    conv_kernel: int = 5
    deconv_kernel: int = 5
    channels: tuple = (16, 64, 128, 512)
    lr: float = 5e-5
    batch_size: int = 64
    steps: int = 125
    weight_decay: float = 0.0


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "float32"
    paths: PathsSection = field(default_factory=PathsSection)
    vae: VaeSection = field(default_factory=VaeSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    downstream: DownstreamSection = field(default_factory=DownstreamSection)


_SECTIONS = ("paths", "vae", "diffusion", "pipeline", "metrics", "downstream")


def _assign(obj, key: str, value, where: str) -> None:
    if key not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown config key {where}.{key}")
    current = getattr(obj, key)
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}.{key} expects a list")
        value = tuple(value)
    setattr(obj, key, value)


def _apply_dict(cfg: RunConfig, values: dict) -> None:
    for key, value in values.items():
        if key in ("seed", "precision"):
            setattr(cfg, key, value)
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            for sub, v in value.items():
                _assign(getattr(cfg, key), sub, v, key)
        else:
            raise ConfigError(f"unknown config key {key!r}")


def _parse_env_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw  # bare strings, e.g. paths


def _apply_env(cfg: RunConfig, environ) -> None:
    for name in sorted(environ):
        if not name.startswith("DALI_"):
            continue
        tail = name[len("DALI_"):].lower()
        value = _parse_env_value(environ[name])
        if tail in ("seed", "precision"):
            setattr(cfg, tail, value)
            continue
        section, _, key = tail.partition("_")
        if section not in _SECTIONS or not key:
            raise ConfigError(f"unrecognized environment override {name}")
        _assign(getattr(cfg, section), key, value, section)


def load_config(path: str | None = None, environ=None) -> RunConfig:
    """Defaults, then the JSON file, then DALI_* environment overrides."""
    cfg = RunConfig()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fp:
            values = json.load(fp)
        if not isinstance(values, dict):
            raise ConfigError("config root must be a JSON object")
        _apply_dict(cfg, values)
    _apply_env(cfg, os.environ if environ is None else environ)
    if cfg.precision not in ("float32", "float64"):
        raise ConfigError(f"precision must be float32 or float64, got {cfg.precision!r}")
    if not isinstance(cfg.seed, int):
        raise ConfigError("seed must be an integer")
    return cfg


def resolved_dict(cfg: RunConfig) -> dict:
    def clean(v):
        if isinstance(v, tuple):
            return list(v)
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        return v

    return clean(dataclasses.asdict(cfg))


def _write_json(payload: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(payload, fp, indent=1, sort_keys=True)
        fp.write("\n")


def _write_resolved(cfg: RunConfig, out_dir: str, command: str, args: dict | None = None) -> None:
    # deliberately path-free so reruns into fresh directories stay comparable
    payload = {"command": command, "config": resolved_dict(cfg)}
    if args:
        payload["args"] = args
    _write_json(payload, os.path.join(out_dir, "resolved_config.json"))


def _config_sibling(report_path: str) -> str:
    stem, _ = os.path.splitext(report_path)
    return stem + ".config.json"


def _write_curve(path: str, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fp:
        writer = csv.DictWriter(fp, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _apply_precision(cfg: RunConfig) -> None:
    nn.set_default_dtype(np.float32 if cfg.precision == "float32" else np.float64)


# ---------------------------------------------------------------------------
# config -> module configs


def _vae_cfg(cfg: RunConfig) -> VaeConfig:
    v = cfg.vae
    return VaeConfig(widths=v.widths, d_latent=v.d_latent, groups=v.groups,
                     kl_weight=v.kl_weight)


def _vae_tcfg(cfg: RunConfig) -> VaeTrainConfig:
    v = cfg.vae
    return VaeTrainConfig(steps=v.steps, batch_size=v.batch_size, lr=v.lr,
                          weight_decay=v.weight_decay, ema_decay=v.ema_decay,
                          seed=cfg.seed, log_every=v.log_every)


def _unet_cfg(cfg: RunConfig) -> UNetConfig:
    d = cfg.diffusion
    return UNetConfig(d_latent=cfg.vae.d_latent, base=d.base, mults=d.mults,
                      attn_levels=d.attn_levels, d_attn=d.d_attn,
                      time_dim=d.time_dim, groups=d.groups, k=d.k, d_l=d.d_l)


def _enc_cfg(cfg: RunConfig) -> EncoderConfig:
    d = cfg.diffusion
    return EncoderConfig(d_l=d.d_l, k=d.k, clock_max=d.clock_max,
                         nonlinearity=d.nonlinearity)


def _dif_tcfg(cfg: RunConfig) -> DiffusionTrainConfig:
    d = cfg.diffusion
    return DiffusionTrainConfig(steps=d.steps, batch_size=d.batch_size, lr=d.lr,
                                weight_decay=d.weight_decay, ema_decay=d.ema_decay,
                                cond_dropout=d.cond_dropout, seed=cfg.seed,
                                log_every=d.log_every)


def _predictor_cfg(cfg: RunConfig) -> PredictorConfig:
    d = cfg.downstream
    return PredictorConfig(conv_kernel=d.conv_kernel, deconv_kernel=d.deconv_kernel,
                           channels=d.channels, lr=d.lr, batch_size=d.batch_size,
                           steps=d.steps, weight_decay=d.weight_decay, seed=cfg.seed)


# ---------------------------------------------------------------------------
# subcommands


def _load_cfg_for(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    _apply_precision(cfg)
    return cfg


def cmd_toy_data(args) -> int:
    cfg = _load_cfg_for(args)
    if args.n < 1:
        raise DataError("need n >= 1")
    height = args.height or args.size
    width = args.width or args.size
    if height < 8 or width < 8:
        raise DataError("toy maps must be at least 8x8")
    out = args.out or os.path.join(cfg.paths.datasets, "toy")
    make_toy_dataset(args.n, height, width, cfg.seed, out)
    _write_resolved(cfg, out, "toy-data",
                    {"n": args.n, "height": height, "width": width})
    print(f"wrote {args.n} samples to {out}")
    return 0


def cmd_split(args) -> int:
    cfg = _load_cfg_for(args)
    manifest = load_manifest(args.manifest)
    designs = [d for d in (args.designs or "").split(",") if d]
    options = {}
    if args.clock_period:
        options["clock_period"] = args.clock_period
    if args.utilization:
        options["utilization"] = args.utilization
    train, test = split_dataset(manifest, designs, options or None)
    out = args.out or cfg.paths.datasets
    os.makedirs(out, exist_ok=True)
    save_manifest(train, os.path.join(out, "train_manifest.json"))
    save_manifest(test, os.path.join(out, "test_manifest.json"))
    _write_resolved(cfg, out, "split",
                    {"designs": designs, "options": {k: list(v) for k, v in options.items()}})
    print(f"train {len(train.entries)} / test {len(test.entries)} -> {out}")
    return 0


def cmd_augment(args) -> int:
    cfg = _load_cfg_for(args)
    manifest = load_manifest(args.manifest)
    indices = [int(i) for i in args.indices.split(",") if i]
    if not indices or not all(1 <= i <= 11 for i in indices):
        raise DataError("augmentation indices must be in 1..11")
    out = args.out or os.path.join(cfg.paths.datasets, "aug")
    os.makedirs(out, exist_ok=True)
    entries = list(manifest.entries)  # originals stay addressable
    split_of = {e.id: e.split for e in manifest.entries}
    for sample in load_samples(manifest):
        split = split_of[sample.id]
        for idx in indices:
            aug = augment(sample, idx)
            path = os.path.join(out, f"{aug.id}.dalipd")
            save_sample(aug, path)
            entries.append(manifest_entry_for(aug, path, split))
    save_manifest(DatasetManifest(entries=entries), os.path.join(out, "manifest.json"))
    _write_resolved(cfg, out, "augment", {"indices": indices})
    print(f"{len(entries)} entries -> {out}/manifest.json")
    return 0


def cmd_train_vae(args) -> int:
    cfg = _load_cfg_for(args)
    if args.steps is not None:
        cfg.vae.steps = args.steps
    samples = load_samples(load_manifest(args.data))
    x = np.stack([s.channels for s in samples])
    vcfg = _vae_cfg(cfg)
    out = args.out or os.path.join(cfg.paths.checkpoints, "run")
    os.makedirs(out, exist_ok=True)
    store = nn.ParamStore()
    init_vae(store, vcfg, nn.make_rng(cfg.seed, 0))
    history = train_vae(x, store, vcfg, _vae_tcfg(cfg))
    meta = {"vae_cfg": {"widths": list(vcfg.widths), "d_latent": vcfg.d_latent,
                        "groups": vcfg.groups, "kl_weight": vcfg.kl_weight}}
    save_checkpoint(store, os.path.join(out, "vae.ckpt"), meta=meta)
    rows = [{"step": s, "loss": l, "recon": r, "kl": k}
            for s, l, r, k in zip(history["step"], history["loss"],
                                  history["recon"], history["kl"])]
    _write_curve(os.path.join(out, "vae_curve.csv"), rows, ["step", "loss", "recon", "kl"])
    _write_resolved(cfg, out, "train-vae", {"n_train": len(samples)})
    print(f"vae: {cfg.vae.steps} steps on {len(samples)} samples, "
          f"final loss {history['loss'][-1]:.5f} -> {out}")
    return 0


def cmd_train_diffusion(args) -> int:
    cfg = _load_cfg_for(args)
    if args.steps is not None:
        cfg.diffusion.steps = args.steps
    samples = load_samples(load_manifest(args.data))
    out = args.out or os.path.join(cfg.paths.checkpoints, "run")
    vae_path = args.vae or os.path.join(out, "vae.ckpt")
    vae_store, vmeta = load_checkpoint(vae_path)
    vc = vmeta.get("vae_cfg")
    if vc is None:
        raise CheckpointError(f"{vae_path} is not a vae checkpoint")
    vae_cfg = VaeConfig(widths=tuple(vc["widths"]), d_latent=vc["d_latent"],
                        groups=vc["groups"], kl_weight=vc["kl_weight"])
    cfg.vae.widths = vae_cfg.widths
    cfg.vae.d_latent = vae_cfg.d_latent

    x = np.stack([s.channels for s in samples])
    # latents come from the EMA encoder, the same weights generation decodes with
    vae_ema = vae_store.ema_store()
    latents = compute_latents(x, vae_ema, vae_cfg)
    scale = 1.0 / max(float(latents.std()), 1e-8)
    latents = (latents * scale).astype(latents.dtype)

    enc_cfg = _enc_cfg(cfg)
    ucfg = _unet_cfg(cfg)
    schedule = make_schedule(cfg.diffusion.timesteps, cfg.diffusion.beta_start,
                             cfg.diffusion.beta_end)
    store = nn.ParamStore()
    rng = nn.make_rng(cfg.seed, 10)
    init_encoder(store, enc_cfg, rng)
    init_unet(store, ucfg, rng)
    history = train_diffusion(latents, [s.params for s in samples], schedule,
                              store, enc_cfg, ucfg, _dif_tcfg(cfg))

    models = Models(vae_store=vae_store, vae_cfg=vae_cfg, dif_store=store,
                    enc_cfg=enc_cfg, unet_cfg=ucfg, schedule=schedule,
                    sampler_steps=cfg.diffusion.sampler_steps,
                    guidance_scale=cfg.diffusion.guidance_scale,
                    calibration=calibrate_utilization(samples),
                    latent_scale=scale)
    os.makedirs(out, exist_ok=True)
    save_models(models, out)
    rows = [{"step": s, "loss": l} for s, l in zip(history["step"], history["loss"])]
    _write_curve(os.path.join(out, "diffusion_curve.csv"), rows, ["step", "loss"])
    _write_resolved(cfg, out, "train-diffusion", {"n_train": len(samples)})
    print(f"diffusion: {cfg.diffusion.steps} steps, latent scale {scale:.4f}, "
          f"calibration {models.calibration:.4f}, final loss {history['loss'][-1]:.5f} -> {out}")
    return 0


def _parse_requests(path: str, cfg: RunConfig) -> list[GenerationRequest]:
    with open(path, "r", encoding="utf-8") as fp:
        payload = json.load(fp)
    if isinstance(payload, dict) and "template" in payload:
        count = payload.get("count", 1)
        items = [dict(payload["template"]) for _ in range(count)]
    elif isinstance(payload, dict) and "requests" in payload:
        items = payload["requests"]
    elif isinstance(payload, list):
        items = payload
    else:
        raise ConfigError("requests file must be a list, {requests: [...]}, "
                          "or {count, template}")
    requests = []
    required = ("height", "width", "clock_period", "utilization", "macro_count")
    for i, item in enumerate(items):
        missing = [k for k in required if k not in item]
        if missing:
            raise ConfigError(f"request {i} missing {missing}")
        extra = set(item) - set(required) - {"max_iterations"}
        if extra:
            raise ConfigError(f"request {i} has unknown keys {sorted(extra)}")
        requests.append(GenerationRequest(
            height=int(item["height"]), width=int(item["width"]),
            clock_period=float(item["clock_period"]),
            utilization=float(item["utilization"]),
            macro_count=int(item["macro_count"]),
            max_iterations=int(item.get("max_iterations", cfg.pipeline.max_iterations)),
        ))
    if not requests:
        raise ConfigError("no generation requests given")
    return requests


def cmd_generate(args) -> int:
    cfg = _load_cfg_for(args)
    models = load_models(args.ckpt)
    if args.sampler_steps is not None:
        models.sampler_steps = args.sampler_steps
    if args.guidance is not None:
        models.guidance_scale = args.guidance
    requests = _parse_requests(args.requests, cfg)
    for req in requests:  # fail before any file is written
        req.validate(models.vae_cfg.f, models.enc_cfg.k)
    out = args.out or os.path.join(cfg.paths.datasets, "generated")
    _, report = generate_dataset(requests, models, out,
                                 workers=args.workers, master_seed=cfg.seed)
    _write_resolved(cfg, out, "generate",
                    {"n_requests": len(requests),
                     "sampler_steps": models.sampler_steps,
                     "guidance_scale": models.guidance_scale})
    mean_it = report["iterations"]["mean"]
    print(f"generated {report['generated']}/{report['requested']} "
          f"(mean iterations {mean_it if mean_it is None else round(mean_it, 2)}) -> {out}")
    if report["failures"]:
        for f in report["failures"]:
            print(f"  failed {f['id']}: {f['error']}", file=sys.stderr)
        return 1
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_cfg_for(args)
    set_a = load_samples(load_manifest(args.a))
    set_b = load_samples(load_manifest(args.b))
    if not set_a or not set_b:
        raise MetricError("both sets must be nonempty")
    names = list(CHANNEL_NAMES)

    report: dict = {"n_a": len(set_a), "n_b": len(set_b)}
    fids = {}
    for c, name in enumerate(names):
        fids[name] = fid([s.channels[c] for s in set_a], [s.channels[c] for s in set_b])
    report["fid"] = {"per_channel": fids, "mean": float(np.mean(list(fids.values())))}

    n_pairs = min(len(set_a), len(set_b))
    paired = {}
    for c, name in enumerate(names):
        svals = [ssim(set_a[i].channels[c], set_b[i].channels[c]) for i in range(n_pairs)]
        lvals = [l1_map(set_a[i].channels[c], set_b[i].channels[c]) for i in range(n_pairs)]
        paired[name] = {"ssim": float(np.mean(svals)), "l1": float(np.mean(lvals))}
    report["paired"] = {"n_pairs": n_pairs, "per_channel": paired}

    hotspots = {}
    for key, group in (("a", set_a), ("b", set_b)):
        hotspots[key] = {
            name: {
                "hi": float(np.mean([hotspot_fraction(s.channels[c])[0] for s in group])),
                "lo": float(np.mean([hotspot_fraction(s.channels[c])[1] for s in group])),
            }
            for c, name in enumerate(names)
        }
    report["hotspot"] = hotspots

    if len(set_a) >= 2:
        per = {}
        for c, name in enumerate(names):
            stats = pairwise_ssim([s.channels[c] for s in set_a])
            per[name] = {"avg": stats["avg"], "stdv": stats["stdv"],
                         "n_pairs": stats["n_pairs"]}
        report["pairwise_ssim"] = {
            "per_channel": per,
            "mean": float(np.mean([p["avg"] for p in per.values()])),
        }

    report["histograms"] = {
        key: {name: histogram_stats([s.channels[c] for s in group], cfg.metrics.hist_bins)
              for c, name in enumerate(names)}
        for key, group in (("a", set_a), ("b", set_b))
    }

    out = args.out or os.path.join(cfg.paths.reports, "report.json")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    _write_json(report, out)
    payload = {"command": "evaluate", "config": resolved_dict(cfg)}
    _write_json(payload, _config_sibling(out))
    print(f"fid mean {report['fid']['mean']:.3f} -> {out}")
    return 0


def cmd_features(args) -> int:
    cfg = _load_cfg_for(args)
    samples = load_samples(load_manifest(args.manifest))
    out = args.out or os.path.join(cfg.paths.reports, "features.csv")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    rows = export_features(samples, out)
    payload = {"command": "features", "config": resolved_dict(cfg)}
    _write_json(payload, _config_sibling(out))
    print(f"{len(rows)} rows -> {out}")
    return 0


def cmd_downstream_train(args) -> int:
    cfg = _load_cfg_for(args)
    if args.steps is not None:
        cfg.downstream.steps = args.steps
    if args.lr is not None:
        cfg.downstream.lr = args.lr
    task = TaskSpec.named(args.task)
    samples = load_samples(load_manifest(args.data))
    pcfg = _predictor_cfg(cfg)
    out = args.out or os.path.join(cfg.paths.checkpoints, f"downstream-{task.name}")
    os.makedirs(out, exist_ok=True)
    store, curve = train_predictor(samples, task, pcfg)
    meta = {"task": task.name,
            "predictor_cfg": {"conv_kernel": pcfg.conv_kernel,
                              "deconv_kernel": pcfg.deconv_kernel,
                              "channels": list(pcfg.channels),
                              "lr": pcfg.lr, "batch_size": pcfg.batch_size,
                              "steps": pcfg.steps,
                              "weight_decay": pcfg.weight_decay,
                              "seed": pcfg.seed}}
    save_checkpoint(store, os.path.join(out, "predictor.ckpt"), meta=meta)
    rows = [{"step": i + 1, "loss": l} for i, l in enumerate(curve)]
    _write_curve(os.path.join(out, "predictor_curve.csv"), rows, ["step", "loss"])
    _write_resolved(cfg, out, "downstream-train",
                    {"task": task.name, "n_train": len(samples)})
    last = curve[-1] if curve else float("nan")
    print(f"{task.name}: {len(curve)} steps, final loss {last:.5f} -> {out}")
    return 0


def _load_predictor(path: str) -> tuple[nn.ParamStore, TaskSpec, PredictorConfig]:
    store, meta = load_checkpoint(path)
    if "task" not in meta or "predictor_cfg" not in meta:
        raise CheckpointError(f"{path} is not a predictor checkpoint")
    p = meta["predictor_cfg"]
    pcfg = PredictorConfig(conv_kernel=p["conv_kernel"], deconv_kernel=p["deconv_kernel"],
                           channels=tuple(p["channels"]), lr=p["lr"],
                           batch_size=p["batch_size"], steps=p["steps"],
                           weight_decay=p["weight_decay"], seed=p["seed"])
    return store, TaskSpec.named(meta["task"]), pcfg


def cmd_downstream_eval(args) -> int:
    cfg = _load_cfg_for(args)
    store, task, pcfg = _load_predictor(args.ckpt)
    samples = load_samples(load_manifest(args.data))
    l1, hot = evaluate_predictor(store, task, samples, pcfg)
    report = {"task": task.name, "n_eval": len(samples),
              "l1": l1, "hotspot_l1": hot}
    out = args.out or os.path.join(cfg.paths.reports, f"downstream-{task.name}.json")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    _write_json(report, out)
    payload = {"command": "downstream-eval", "config": resolved_dict(cfg)}
    _write_json(payload, _config_sibling(out))
    print(f"{task.name}: l1 {l1:.5f}, hotspot l1 {hot:.5f} -> {out}")
    return 0


def cmd_finetune_sweep(args) -> int:
    cfg = _load_cfg_for(args)
    store, task, pcfg = _load_predictor(args.pretrained)
    if args.steps is not None:
        pcfg.steps = args.steps
    if args.lr is not None:
        pcfg.lr = args.lr
    real = load_samples(load_manifest(args.real))
    eval_set = load_samples(load_manifest(args.eval))
    sizes = [int(s) for s in args.sizes.split(",") if s != ""]
    if not sizes:
        raise ConfigError("need at least one sweep size")
    out = args.out or os.path.join(cfg.paths.reports, f"sweep-{task.name}")
    os.makedirs(out, exist_ok=True)
    result = fine_tune_sweep(store, real, eval_set, sizes, task, pcfg,
                             csv_path=os.path.join(out, "sweep.csv"))
    _write_json(result, os.path.join(out, "sweep.json"))
    _write_resolved(cfg, out, "finetune-sweep",
                    {"task": task.name, "sizes": sizes,
                     "n_real": len(real), "n_eval": len(eval_set)})
    print(f"{task.name}: baseline l1 {result['baseline']['l1']:.5f}, "
          f"{len(sizes)} sweep points -> {out}")
    return 0


# ---------------------------------------------------------------------------
# selfcheck: cheap invariants run on demand


def _check_schedule() -> None:
    s = make_schedule(100, 1e-4, 0.02)
    assert np.allclose(s.alpha + s.beta, 1.0, atol=1e-15)
    assert np.allclose(s.alpha_bar, np.cumprod(s.alpha), atol=1e-15)


def _check_terminal_step() -> None:
    from .diffusion import ddpm_step, forward_noise
    rng = nn.make_rng(0)
    s = make_schedule(50, 1e-4, 0.02)
    x0 = rng.standard_normal((1, 2, 4, 4))
    eps = rng.standard_normal(x0.shape)
    x1 = forward_noise(x0, np.array([1]), eps, s)
    back = ddpm_step(x1, 1, eps, s)
    assert np.abs(back - x0).max() < 1e-6


def _check_attention() -> None:
    from .diffusion import cross_attention
    from .nn import Tensor
    rng = nn.make_rng(1)
    # zero W_Q gives exactly dyadic weights; integer values keep every
    # intermediate exact, so reordering keys cannot move a single bit
    x = Tensor(rng.standard_normal((1, 5, 8)).astype(np.float32))
    emb = rng.integers(-4, 5, (1, 8, 8)).astype(np.float32)
    wq = Tensor(np.zeros((8, 6), dtype=np.float32))
    wk = Tensor(rng.standard_normal((8, 6)).astype(np.float32))
    wv = Tensor(rng.integers(-3, 4, (8, 6)).astype(np.float32))
    perm = rng.permutation(8)
    out = cross_attention(x, Tensor(emb), wq, wk, wv).data
    out_p = cross_attention(x, Tensor(emb[:, perm].copy()), wq, wk, wv).data
    assert np.array_equal(out, out_p)
    xg = Tensor(rng.standard_normal((2, 5, 8)))
    embg = rng.standard_normal((2, 3, 8))
    wqg, wkg, wvg = (Tensor(rng.standard_normal((8, 6))) for _ in range(3))
    a = cross_attention(xg, Tensor(embg), wqg, wkg, wvg).data
    b = cross_attention(xg, Tensor(embg[:, [2, 0, 1]].copy()), wqg, wkg, wvg).data
    assert np.abs(a - b).max() < 1e-12
    v = embg @ wvg.data
    assert a.min() >= v.min() - 1e-9 and a.max() <= v.max() + 1e-9


def _check_kl() -> None:
    from .vae import VaePosterior, kl_divergence
    from .nn import Tensor
    zero = Tensor(np.zeros((1, 2, 3, 3)))
    post = VaePosterior(mu=zero, log_var=zero)
    assert float(kl_divergence(post).data) == 0.0


def _check_conv_adjoint() -> None:
    # <conv(x), u> == <x, conv_T(u)> with the shared weight block
    rng = nn.make_rng(2)
    x = nn.tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
    w = nn.tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    y = nn.conv2d(x, w, stride=2, padding=1)
    u = rng.standard_normal(y.shape)
    (y * nn.tensor(u)).sum().backward()
    lhs = float((y.data * u).sum())
    with nn.no_grad():
        ut = nn.conv_transpose2d(nn.tensor(u), nn.tensor(w.data), stride=2, padding=1)
    assert ut.data.shape == x.data.shape
    rhs = float((x.data * ut.data).sum())
    assert abs(lhs - rhs) < 1e-8 * max(1.0, abs(lhs))
    assert np.allclose(x.grad, ut.data, atol=1e-10)


def _check_rng() -> None:
    a = nn.make_rng(7, 3).standard_normal(5)
    b = nn.make_rng(7, 3).standard_normal(5)
    assert np.array_equal(a, b)


def _check_roundtrip() -> None:
    import tempfile
    from .data import load_sample
    with tempfile.TemporaryDirectory() as d:
        s = make_toy_sample(0, 16, 16, seed=5)
        path = os.path.join(d, "x.dalipd")
        save_sample(s, path)
        back = load_sample(path)
        assert np.array_equal(s.channels, back.channels)
        assert s.params.macros == back.params.macros


def _check_involutions() -> None:
    s = make_toy_sample(1, 16, 16, seed=5)
    for idx in (1, 4, 5, 6, 7):
        twice = augment(augment(s, idx), idx)
        assert np.array_equal(twice.channels, s.channels)


_SELFCHECKS = [
    ("noise schedule algebra", _check_schedule),
    ("terminal denoise identity", _check_terminal_step),
    ("attention invariances", _check_attention),
    ("kl closed form", _check_kl),
    ("conv adjoint and grads", _check_conv_adjoint),
    ("seeded rng reproducibility", _check_rng),
    ("sample file round trip", _check_roundtrip),
    ("augmentation involutions", _check_involutions),
]


def cmd_selfcheck(args) -> int:
    _load_cfg_for(args)
    failed = 0
    for name, fn in _SELFCHECKS:
        try:
            fn()
        except Exception as exc:  # report and keep going
            failed += 1
            print(f"FAIL {name}: {exc}")
        else:
            print(f"ok   {name}")
    if failed:
        print(f"{failed}/{len(_SELFCHECKS)} checks failed")
        return 1
    print(f"all {len(_SELFCHECKS)} checks passed")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="override config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dali",
        description="conditioned latent-diffusion generator for circuit layout heatmaps",
    )
    parser.add_argument("--version", action="version", version=FORMAT_LINE)
    parser.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="worker pool size for parallel commands")
    sub = parser.add_subparsers(dest="cmd", metavar="command")

    p = sub.add_parser("toy-data", help="write a procedural toy dataset")
    _add_common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_toy_data)

    p = sub.add_parser("split", help="hold out designs or parameter options")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--designs", default="", help="comma-separated design ids")
    p.add_argument("--clock-period", type=float, action="append")
    p.add_argument("--utilization", type=float, action="append")
    p.add_argument("--out")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("augment", help="write symmetry-augmented copies")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--indices", default="1,2,3,4,5,6,7,8,9,10,11")
    p.add_argument("--out")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train-vae", help="train the reconstruction autoencoder")
    _add_common(p)
    p.add_argument("--data", required=True, help="training manifest")
    p.add_argument("--steps", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("train-diffusion", help="train the latent denoiser")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--vae", help="vae checkpoint (default <out>/vae.ckpt)")
    p.add_argument("--steps", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train_diffusion)

    p = sub.add_parser("generate", help="sample layouts for a request file")
    _add_common(p)
    p.add_argument("--requests", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sampler-steps", type=int)
    p.add_argument("--guidance", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="compare two sample sets")
    _add_common(p)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("features", help="export per-sample feature rows")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("downstream-train", help="train a map-to-map predictor")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--task", required=True, choices=("ir_drop", "rudy"))
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_downstream_train)

    p = sub.add_parser("downstream-eval", help="evaluate a predictor checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_downstream_eval)

    p = sub.add_parser("finetune-sweep", help="fine-tune on growing real subsets")
    _add_common(p)
    p.add_argument("--pretrained", required=True)
    p.add_argument("--real", required=True)
    p.add_argument("--eval", required=True)
    p.add_argument("--sizes", required=True, help="comma-separated real-set sizes")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_finetune_sweep)

    p = sub.add_parser("selfcheck", help="run fast library invariant checks")
    _add_common(p)
    p.set_defaults(func=cmd_selfcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else int(exc.code)
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, DataError, ScheduleError, MetricError, CheckpointError,
            GenerationError, nn.NonFiniteError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
