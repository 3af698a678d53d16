"""Conditioning encoder: bbox normalization, padding rule, projection algebra."""
import numpy as np
import pytest

from dalipd import nn
from dalipd.data import CircuitParams, DataError
from dalipd.encoding import (
    EncoderConfig,
    encode,
    encode_batch,
    init_encoder,
    normalize_bboxes,
)


def _store(cfg, seed=0):
    store = nn.ParamStore()
    init_encoder(store, cfg, nn.make_rng(seed))
    return store


def _params(macros, clock=2.0, u=0.5):
    return CircuitParams(clock_period=clock, utilization=u, height=64, width=64,
                         macros=macros)


# ---------------------------------------------------------------------------
# normalize_bboxes


def test_normalize_full_frame():
    assert normalize_bboxes([(0, 0, 80, 60)], 60, 80) == [(0.0, 0.0, 1.0, 1.0)]


def test_normalize_arithmetic():
    out = normalize_bboxes([(10, 20, 30, 40)], 100, 100)
    assert out == [(0.1, 0.2, 0.3, 0.4)]


def test_normalize_divides_x_by_width_y_by_height():
    # non-square layout so a swapped divisor would show up
    (box,) = normalize_bboxes([(10, 5, 20, 15)], 50, 200)
    assert box == (10 / 200, 5 / 50, 20 / 200, 15 / 50)


def test_normalize_rejects_degenerate():
    with pytest.raises(DataError):
        normalize_bboxes([(10, 10, 10, 40)], 100, 100)


def test_normalize_rejects_outside_layout():
    with pytest.raises(DataError):
        normalize_bboxes([(0, 0, 120, 40)], 100, 100)
    with pytest.raises(DataError):
        normalize_bboxes([(-1, 0, 10, 10)], 100, 100)


# ---------------------------------------------------------------------------
# encode: padding and projection algebra


def test_zero_box_weights_collapse_rows():
    cfg = EncoderConfig(d_l=8, k=5)
    store = _store(cfg)
    store["enc.w_b"].data[:] = 0.0
    emb = encode(_params([(0.1, 0.1, 0.4, 0.5), (0.5, 0.6, 0.9, 0.9)]), store, cfg)
    rows = emb.L.data
    assert rows.shape == (5, 8)
    for j in range(1, 5):
        np.testing.assert_array_equal(rows[j], rows[0])


def test_padding_rows_use_zero_box():
    cfg = EncoderConfig(d_l=6, k=4)
    store = _store(cfg, seed=3)
    with_pad = encode(_params([(0.2, 0.2, 0.6, 0.7)]), store, cfg).L.data
    zero_box = encode(_params([(0.0, 0.0, 0.0, 0.0)]), store, cfg).L.data
    # CircuitParams rejects degenerate boxes, so build the zero-box row via
    # the batch helper's own padding: rows 1..3 of a single-box encode
    np.testing.assert_array_equal(with_pad[1], with_pad[2])
    np.testing.assert_array_equal(with_pad[2], with_pad[3])
    assert np.abs(with_pad[0] - with_pad[1]).max() > 1e-6


def test_full_k_has_no_padding_rows():
    cfg = EncoderConfig(d_l=4, k=2)
    store = _store(cfg, seed=1)
    boxes = [(0.0, 0.0, 0.3, 0.3), (0.5, 0.5, 0.8, 0.9)]
    rows = encode(_params(boxes), store, cfg).L.data
    assert np.abs(rows[0] - rows[1]).max() > 1e-6


def test_too_many_macros_rejected():
    cfg = EncoderConfig(d_l=4, k=1)
    store = _store(cfg)
    boxes = [(0.0, 0.0, 0.3, 0.3), (0.5, 0.5, 0.8, 0.9)]
    with pytest.raises(DataError):
        encode(_params(boxes), store, cfg)


def test_hand_computed_row_identity_phi():
    cfg = EncoderConfig(d_l=3, k=2, nonlinearity="identity", clock_max=10.0)
    store = nn.ParamStore()
    init_encoder(store, cfg, nn.make_rng(0))
    w_b = np.arange(12, dtype=np.float32).reshape(4, 3)
    w_cu = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, 1.0]], dtype=np.float32)
    store["enc.w_b"].data[:] = w_b
    store["enc.w_cu"].data[:] = w_cu
    box = (0.5, 0.25, 1.0, 0.75)
    rows = encode(_params([box], clock=5.0, u=0.5), store, cfg).L.data
    cu = np.array([0.5, 0.5], dtype=np.float32)  # clock 5/10, u 0.5
    expect0 = np.asarray(box, dtype=np.float32) @ w_b + cu @ w_cu
    expect_pad = cu @ w_cu
    np.testing.assert_allclose(rows[0], expect0, rtol=0, atol=1e-6)
    np.testing.assert_allclose(rows[1], expect_pad, rtol=0, atol=1e-6)


def test_identity_phi_zero_cu_is_pure_box_projection():
    cfg = EncoderConfig(d_l=5, k=3, nonlinearity="identity")
    store = _store(cfg, seed=2)
    boxes = [(0.1, 0.2, 0.3, 0.4), (0.5, 0.1, 0.9, 0.3)]
    p = CircuitParams(clock_period=1e-9, utilization=0.0, height=10, width=10,
                      macros=boxes)
    rows = encode(p, store, cfg).L.data
    b = np.zeros((3, 4), dtype=np.float32)
    b[0] = boxes[0]
    b[1] = boxes[1]
    # clock 1e-9 / 10 underflows the float32 projection to ~0: bound instead
    np.testing.assert_allclose(rows, b @ store["enc.w_b"].data, rtol=0, atol=1e-6)


def test_box_permutation_permutes_rows():
    cfg = EncoderConfig(d_l=8, k=6)
    store = _store(cfg, seed=5)
    boxes = [(0.0, 0.0, 0.2, 0.2), (0.3, 0.3, 0.6, 0.5), (0.7, 0.1, 0.9, 0.8)]
    a = encode(_params(boxes), store, cfg).L.data
    b = encode(_params([boxes[2], boxes[0], boxes[1]]), store, cfg).L.data
    np.testing.assert_array_equal(b[0], a[2])
    np.testing.assert_array_equal(b[1], a[0])
    np.testing.assert_array_equal(b[2], a[1])
    np.testing.assert_array_equal(b[3:], a[3:])


def test_clock_clipped_at_configured_max():
    cfg = EncoderConfig(d_l=4, k=2, nonlinearity="identity")
    store = _store(cfg, seed=7)
    at_max = encode(_params([(0.1, 0.1, 0.5, 0.5)], clock=10.0), store, cfg).L.data
    above = encode(_params([(0.1, 0.1, 0.5, 0.5)], clock=25.0), store, cfg).L.data
    np.testing.assert_array_equal(at_max, above)


def test_batch_stacks_single_encodes():
    cfg = EncoderConfig(d_l=8, k=4)
    store = _store(cfg, seed=11)
    p1 = _params([(0.1, 0.1, 0.4, 0.4)], clock=3.0, u=0.3)
    p2 = _params([(0.2, 0.5, 0.7, 0.9), (0.8, 0.1, 0.95, 0.3)], clock=6.0, u=0.7)
    batch = encode_batch([p1, p2], store, cfg).data
    assert batch.shape == (2, 4, 8)
    np.testing.assert_array_equal(batch[0], encode(p1, store, cfg).L.data)
    np.testing.assert_array_equal(batch[1], encode(p2, store, cfg).L.data)


def test_embedding_finite_and_shaped():
    cfg = EncoderConfig()
    store = _store(cfg, seed=13)
    emb = encode(_params([(0.25, 0.25, 0.75, 0.75)]), store, cfg)
    assert emb.L.shape == (cfg.k, cfg.d_l)
    assert emb.k == cfg.k and emb.d_l == cfg.d_l
    assert np.isfinite(emb.L.data).all()


@pytest.mark.parametrize("phi", ["silu", "identity"])
def test_encode_gradients_match_finite_differences(phi):
    cfg = EncoderConfig(d_l=3, k=3, nonlinearity=phi)
    store = nn.ParamStore()
    with nn.precision("float64"):
        init_encoder(store, cfg, nn.make_rng(17))
        p = _params([(0.1, 0.2, 0.5, 0.8), (0.6, 0.1, 0.9, 0.4)], clock=4.0, u=0.6)

        def loss():
            out = encode_batch([p], store, cfg)
            return (out * out).sum()

        err = nn.grad_check(loss, [store["enc.w_b"], store["enc.w_cu"]])
    assert err < 1e-6
