"""Box sampling, post-processing, constraint checking, and the generate loop."""
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dalipd import nn
from dalipd.nn import Tensor
from dalipd.data import (
    CircuitParams,
    DataError,
    HeatmapSet,
    load_manifest,
    make_toy_sample,
)
from dalipd.encoding import EncoderConfig, init_encoder
from dalipd.diffusion import UNetConfig, init_unet, make_schedule
from dalipd.vae import VaeConfig, init_vae
from dalipd.pipeline import (
    GenerationError,
    GenerationRequest,
    Models,
    calibrate_utilization,
    check,
    generate_dataset,
    generate_one,
    load_models,
    post_process,
    sample_macro_boxes,
    save_models,
)


class FakeRng:
    """Plays back scripted results for rng.uniform calls."""

    def __init__(self, script):
        self.script = list(script)

    def uniform(self, lo=0.0, hi=1.0, size=None):
        v = self.script.pop(0)
        if size is not None:
            return np.asarray(v, dtype=np.float64)
        assert lo - 1e-12 <= v <= hi + 1e-12, (lo, v, hi)
        return v


# ---------------------------------------------------------------------------
# macro box sampling


def test_zero_macros_gives_empty_list():
    assert sample_macro_boxes(0, 0.5, nn.make_rng(0)) == []


def test_negative_macro_count_rejected():
    with pytest.raises(DataError):
        sample_macro_boxes(-1, 0.5, nn.make_rng(0))


def test_high_utilization_leaves_no_macro_room():
    with pytest.raises(GenerationError):
        sample_macro_boxes(1, 0.95, nn.make_rng(0))


def test_scripted_single_box_geometry():
    # target area 0.25, share irrelevant for m=1, aspect 1 -> 0.5 x 0.5 box
    rng = FakeRng([0.25, [1.0], 1.0, 0.2, 0.3])
    (box,) = sample_macro_boxes(1, 0.5, rng)
    np.testing.assert_allclose(box, (0.2, 0.3, 0.7, 0.8), rtol=0, atol=1e-12)


def test_fifty_boxes_keep_pairwise_gap():
    boxes = sample_macro_boxes(50, 0.0, nn.make_rng(41))
    assert len(boxes) == 50
    for i in range(50):
        for j in range(i + 1, 50):
            a, b = boxes[i], boxes[j]
            dx = max(a[0] - b[2], b[0] - a[2])
            dy = max(a[1] - b[3], b[1] - a[3])
            assert max(dx, dy) >= 0.02 - 1e-12


@given(st.integers(0, 10_000), st.integers(1, 3),
       st.floats(0.25, 0.75, allow_nan=False))
@settings(max_examples=40, deadline=None)
def test_sampled_boxes_respect_law(seed, m, u):
    try:
        boxes = sample_macro_boxes(m, u, nn.make_rng(seed))
    except GenerationError:
        return  # placement cap is a documented outcome
    assert len(boxes) == m
    total = 0.0
    for xl, yl, xu, yu in boxes:
        assert 0.0 <= xl < xu <= 1.0 and 0.0 <= yl < yu <= 1.0
        total += (xu - xl) * (yu - yl)
    assert 0.1 - 1e-9 <= total <= min(0.4, 1.0 - u) + 1e-9
    for i in range(m):
        for j in range(i + 1, m):
            a, b = boxes[i], boxes[j]
            assert max(a[0] - b[2], b[0] - a[2], a[1] - b[3], b[1] - a[3]) >= 0.02 - 1e-9


# ---------------------------------------------------------------------------
# post-processing


def _request(toy):
    return GenerationRequest(
        height=toy.params.height, width=toy.params.width,
        clock_period=toy.params.clock_period, utilization=toy.params.utilization,
        macro_count=toy.params.macro_count, seed=0,
    )


def test_post_process_fixed_point_on_clean_sample():
    toy = make_toy_sample(0, 48, 48, seed=3)
    out = post_process(toy.channels, _request(toy), "pp")
    np.testing.assert_array_equal(out.channel("macro_region"),
                                  toy.channel("macro_region"))
    np.testing.assert_allclose(out.channels, toy.channels, rtol=0, atol=1e-6)


def test_post_process_uniform_gray_macro_becomes_full_frame():
    rng = np.random.default_rng(5)
    raw = rng.uniform(0, 1, size=(6, 32, 32)).astype(np.float32)
    raw[1] = 0.6
    out = post_process(raw, GenerationRequest(32, 32, 2.0, 0.5, 1), "pp")
    assert out.params.macros == [(0.0, 0.0, 1.0, 1.0)]
    np.testing.assert_array_equal(out.channel("macro_region"), 1.0)


def test_post_process_recovers_speckled_rectangle():
    raw = np.zeros((6, 40, 40), dtype=np.float32)
    raw[1, 10:20, 12:30] = 1.0
    holes = np.random.default_rng(7).choice(10 * 18, size=9, replace=False)
    rr, cc = np.unravel_index(holes, (10, 18))
    raw[1, 10 + rr, 12 + cc] = 0.3  # interior speckle below threshold
    out = post_process(raw, GenerationRequest(40, 40, 2.0, 0.5, 1), "pp")
    want = np.zeros((40, 40), dtype=np.float32)
    want[10:20, 12:30] = 1.0
    np.testing.assert_array_equal(out.channel("macro_region"), want)


def test_post_process_zeroes_density_inside_macros():
    raw = np.full((6, 16, 16), 0.5, dtype=np.float32)
    raw[1] = 0.0
    raw[1, 2:10, 3:12] = 1.0
    out = post_process(raw, GenerationRequest(16, 16, 2.0, 0.5, 1), "pp")
    assert float(out.channel("cell_density")[2:10, 3:12].max()) == 0.0
    assert float(out.channel("cell_density")[0, 0]) == 0.5


def test_post_process_caps_power_where_density_is_zero():
    raw = np.zeros((6, 16, 16), dtype=np.float32)
    raw[4] = 0.8  # power high everywhere, all density zero, no macro
    out = post_process(raw, GenerationRequest(16, 16, 2.0, 0.5, 0), "pp")
    assert float(out.channel("power").max()) <= 0.05 + 1e-6


def test_post_process_output_always_validates():
    rng = np.random.default_rng(11)
    for i in range(5):
        raw = rng.normal(0.5, 0.6, size=(6, 24, 24)).astype(np.float32)
        out = post_process(raw, GenerationRequest(24, 24, 3.0, 0.4, 2), f"pp{i}")
        out.validate()  # clipping must guarantee [0,1]


# ---------------------------------------------------------------------------
# checking


def test_check_accepts_toy_sample_against_own_params():
    toy = make_toy_sample(1, 48, 48, seed=9)
    assert check(toy, _request(toy), toy.params.macros, calibration=1.0) == []


def test_check_macro_count_mismatch():
    toy = make_toy_sample(2, 48, 48, seed=9)
    req = _request(toy)
    req.macro_count = toy.params.macro_count + 1
    assert "macro_count" in check(toy, req, toy.params.macros)


def test_check_flags_overlapping_rectangles():
    # two disjoint L-shaped components whose bounding boxes interlock
    ch = np.zeros((6, 30, 30), dtype=np.float32)
    ch[1, 5:25, 5:8] = 1.0
    ch[1, 22:25, 5:25] = 1.0   # L number one: bbox rows 5..25, cols 5..25
    ch[1, 10:15, 12:18] = 1.0  # blob inside that bbox, not touching the L
    sample = post_process(ch, GenerationRequest(30, 30, 2.0, 0.0, 2), "ov")
    reasons = check(sample, GenerationRequest(30, 30, 2.0, 0.0, 2))
    assert "overlap" in reasons


def test_check_utilization_window():
    toy = make_toy_sample(3, 48, 48, seed=9)
    req = _request(toy)
    req.utilization = min(1.0, toy.params.utilization + 0.2)
    assert "utilization" in check(toy, req, toy.params.macros)


def test_check_all_zero_density_high_utilization():
    ch = np.zeros((6, 16, 16), dtype=np.float32)
    sample = HeatmapSet(channels=ch, params=CircuitParams(2.0, 0.8, 16, 16, []),
                        id="z")
    req = GenerationRequest(16, 16, 2.0, 0.8, 0)
    assert "utilization" in check(sample, req, [])


def test_check_macro_area_tolerance():
    toy = make_toy_sample(4, 48, 48, seed=9)
    # claim twice the area that was actually rendered
    claimed = [(0.0, 0.0, xu - xl, 2 * (yu - yl)) for xl, yl, xu, yu in
               toy.params.macros]
    got = check(toy, _request(toy), claimed)
    assert "macro_area" in got


def test_check_range_violation():
    ch = np.full((6, 8, 8), 0.5, dtype=np.float32)
    ch[3, 0, 0] = 1.5  # constructed directly; validate() would reject this
    sample = HeatmapSet(channels=ch, params=CircuitParams(2.0, 0.5, 8, 8, []),
                        id="r")
    req = GenerationRequest(8, 8, 2.0, 0.5, 0)
    assert "range" in check(sample, req, [])


def test_calibration_slope_matches_least_squares():
    samples = []
    rng = np.random.default_rng(13)
    us = [0.3, 0.5, 0.7]
    for i, u in enumerate(us):
        ch = np.zeros((6, 16, 16), dtype=np.float32)
        ch[0] = 0.8 * u  # density systematically reads 20% low
        samples.append(HeatmapSet(channels=ch,
                                  params=CircuitParams(2.0, u, 16, 16, []),
                                  id=f"c{i}"))
    c = calibrate_utilization(samples)
    d = np.array([0.8 * u for u in us])
    want = float(np.dot(d, us) / np.dot(d, d))
    assert abs(c - want) < 1e-6
    assert abs(c - 1.25) < 1e-2


def test_calibration_on_toys_is_unity():
    samples = [make_toy_sample(i, 48, 48, seed=21) for i in range(8)]
    assert abs(calibrate_utilization(samples) - 1.0) < 1e-3


# ---------------------------------------------------------------------------
# request validation


def test_request_validation():
    req = GenerationRequest(50, 48, 2.0, 0.5, 2)
    with pytest.raises(DataError):
        req.validate(f=4, k=8)  # 50 % 4 != 0
    req = GenerationRequest(48, 48, 2.0, 1.5, 2)
    with pytest.raises(DataError):
        req.validate(f=4, k=8)
    req = GenerationRequest(48, 48, 2.0, 0.5, 9)
    with pytest.raises(DataError):
        req.validate(f=4, k=8)
    req = GenerationRequest(48, 48, 2.0, 0.5, 2, max_iterations=0)
    with pytest.raises(DataError):
        req.validate(f=4, k=8)


# ---------------------------------------------------------------------------
# generate_one / generate_dataset with a stubbed generator


VAE_CFG = VaeConfig(widths=(4, 8), d_latent=2, groups=2)  # f = 4
UNET_CFG = UNetConfig(d_latent=2, base=8, mults=(1,), attn_levels=(0,),
                      d_attn=8, time_dim=16, groups=4, k=4, d_l=8)
ENC_CFG = EncoderConfig(d_l=8, k=4)


def _models(seed=0):
    vae_store = nn.ParamStore()
    init_vae(vae_store, VAE_CFG, nn.make_rng(seed))
    dif_store = nn.ParamStore()
    init_encoder(dif_store, ENC_CFG, nn.make_rng(seed + 1))
    init_unet(dif_store, UNET_CFG, nn.make_rng(seed + 2))
    return Models(vae_store=vae_store, vae_cfg=VAE_CFG, dif_store=dif_store,
                  enc_cfg=ENC_CFG, unet_cfg=UNET_CFG, schedule=make_schedule(10),
                  sampler_steps=4, guidance_scale=1.0)


def _stub_decode_with(toy):
    def fake_decode(z, store, cfg, prefix="vae"):
        return Tensor(toy.channels[None].copy())
    return fake_decode


def test_stub_generator_accepted_first_iteration(monkeypatch):
    toy = make_toy_sample(0, 48, 48, seed=31)
    monkeypatch.setattr("dalipd.pipeline.vae_decode", _stub_decode_with(toy))
    monkeypatch.setattr("dalipd.pipeline.sample_macro_boxes",
                        lambda m, u, rng, **kw: list(toy.params.macros))
    req = _request(toy)
    rep = generate_one(req, _models(), "stub")
    assert rep.iterations == 1
    assert rep.attempts[0].reasons == []
    # accepted output re-passes the checker
    assert check(rep.sample, req, rep.sample.params.macros) == []


def test_generate_one_deterministic(monkeypatch):
    toy = make_toy_sample(1, 48, 48, seed=32)
    monkeypatch.setattr("dalipd.pipeline.vae_decode", _stub_decode_with(toy))
    monkeypatch.setattr("dalipd.pipeline.sample_macro_boxes",
                        lambda m, u, rng, **kw: list(toy.params.macros))
    req = _request(toy)
    a = generate_one(req, _models(), "d")
    b = generate_one(req, _models(), "d")
    np.testing.assert_array_equal(a.sample.channels, b.sample.channels)
    assert a.iterations == b.iterations


def test_generate_one_reports_exhaustion(monkeypatch):
    toy = make_toy_sample(2, 48, 48, seed=33)
    monkeypatch.setattr("dalipd.pipeline.vae_decode", _stub_decode_with(toy))
    monkeypatch.setattr("dalipd.pipeline.check",
                        lambda *a, **kw: ["forced"])
    req = _request(toy)
    req.max_iterations = 3
    with pytest.raises(GenerationError) as exc:
        generate_one(req, _models(), "x")
    rep = exc.value.report
    assert rep.iterations == 3
    assert rep.rejection_histogram() == {"forced": 3}


def test_infeasible_box_draw_burns_one_iteration(monkeypatch):
    toy = make_toy_sample(3, 48, 48, seed=34)
    calls = {"n": 0}

    def flaky_boxes(m, u, rng, **kw):
        calls["n"] += 1
        if calls["n"] == 1:
            raise GenerationError("infeasible: box 1/1 not placed after 1000 tries")
        return list(toy.params.macros)

    monkeypatch.setattr("dalipd.pipeline.vae_decode", _stub_decode_with(toy))
    monkeypatch.setattr("dalipd.pipeline.sample_macro_boxes", flaky_boxes)
    rep = generate_one(_request(toy), _models(), "flaky")
    assert rep.iterations == 2
    assert rep.attempts[0].reasons == ["infeasible_boxes"]
    assert rep.attempts[1].reasons == []


@pytest.mark.parametrize("workers", [1, 2])
def test_generate_dataset_order_and_reports(tmp_path, monkeypatch, workers):
    toy = make_toy_sample(4, 48, 48, seed=35)
    monkeypatch.setattr("dalipd.pipeline.vae_decode", _stub_decode_with(toy))
    monkeypatch.setattr("dalipd.pipeline.sample_macro_boxes",
                        lambda m, u, rng, **kw: list(toy.params.macros))
    reqs = [_request(toy) for _ in range(4)]
    out = tmp_path / f"gen{workers}"
    manifest, report = generate_dataset(reqs, _models(), str(out),
                                        workers=workers, master_seed=5)
    assert [e.id for e in manifest.entries] == [f"gen{i:05d}" for i in range(4)]
    assert all(e.split == "generated" for e in manifest.entries)
    assert report["generated"] == 4 and report["failures"] == []
    assert (out / "generation_report.json").exists()
    assert (out / "generation_timing.json").exists()


def test_generate_dataset_repeatable_for_fixed_master_seed(tmp_path, monkeypatch):
    toy = make_toy_sample(5, 48, 48, seed=36)
    monkeypatch.setattr("dalipd.pipeline.vae_decode", _stub_decode_with(toy))
    monkeypatch.setattr("dalipd.pipeline.sample_macro_boxes",
                        lambda m, u, rng, **kw: list(toy.params.macros))
    reqs = [_request(toy) for _ in range(2)]
    a, b = tmp_path / "a", tmp_path / "b"
    generate_dataset(reqs, _models(), str(a), master_seed=9)
    generate_dataset(reqs, _models(), str(b), master_seed=9)
    ra = (a / "generation_report.json").read_bytes()
    rb = (b / "generation_report.json").read_bytes()
    assert ra == rb
    for name in ("gen00000.dalipd", "gen00001.dalipd"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_generate_dataset_aggregates_failures(tmp_path, monkeypatch):
    toy = make_toy_sample(6, 48, 48, seed=37)
    monkeypatch.setattr("dalipd.pipeline.vae_decode", _stub_decode_with(toy))
    monkeypatch.setattr("dalipd.pipeline.check", lambda *a, **kw: ["forced"])
    reqs = [_request(toy) for _ in range(3)]
    for r in reqs:
        r.max_iterations = 2
    out = tmp_path / "fail"
    manifest, report = generate_dataset(reqs, _models(), str(out))
    assert manifest.entries == []
    assert len(report["failures"]) == 3
    assert report["rejection_histogram"] == {"forced": 6}
    # report file round-trips as JSON
    loaded = json.loads((out / "generation_report.json").read_text())
    assert loaded["generated"] == 0


# ---------------------------------------------------------------------------
# model persistence


def test_save_load_models_round_trip(tmp_path):
    models = _models(seed=40)
    models.sampler_steps = 7
    models.guidance_scale = 2.5
    models.calibration = 1.01
    models.latent_scale = 0.97
    save_models(models, str(tmp_path))
    loaded = load_models(str(tmp_path))
    assert loaded.vae_cfg == models.vae_cfg
    assert loaded.unet_cfg == models.unet_cfg
    assert loaded.enc_cfg == models.enc_cfg
    assert loaded.sampler_steps == 7
    assert loaded.guidance_scale == 2.5
    assert abs(loaded.calibration - 1.01) < 1e-12
    assert abs(loaded.latent_scale - 0.97) < 1e-12
    assert loaded.schedule.T == models.schedule.T
    np.testing.assert_array_equal(loaded.schedule.alpha_bar,
                                  models.schedule.alpha_bar)
    for name in models.dif_store.names():
        np.testing.assert_array_equal(loaded.dif_store[name].data,
                                      models.dif_store[name].data)
