"""Binary checkpoint format: full state round trips, corruption is rejected."""

import numpy as np
import pytest

from dalipd import nn
from dalipd.nn import (
    CheckpointError,
    ParamStore,
    adamw_step,
    ema_update,
    import_weights,
    load_checkpoint,
    save_checkpoint,
)


def _trained_store():
    rng = nn.make_rng(3)
    store = ParamStore()
    store.add("layer.w", rng.standard_normal((4, 3)).astype(np.float32))
    store.add("layer.b", rng.standard_normal(3).astype(np.float32))
    for _ in range(5):
        for _, p in store.items():
            p.grad = rng.standard_normal(p.data.shape).astype(np.float32)
        adamw_step(store, 1e-3, weight_decay=1e-2)
        ema_update(store, 0.99)
    return store


def test_round_trip_bit_exact(tmp_path):
    store = _trained_store()
    path = tmp_path / "model.ckpt"
    save_checkpoint(store, path, meta={"note": "x", "n": 3})
    back, meta = load_checkpoint(path)
    assert meta == {"note": "x", "n": 3}
    assert set(back.names()) == set(store.names())
    for name in store.names():
        np.testing.assert_array_equal(back[name].data, store[name].data)
        assert back[name].data.dtype == store[name].data.dtype
        np.testing.assert_array_equal(back.ema[name], store.ema[name])
        np.testing.assert_array_equal(back.opt[name].exp_avg, store.opt[name].exp_avg)
        np.testing.assert_array_equal(back.opt[name].exp_avg_sq, store.opt[name].exp_avg_sq)
        assert back.opt[name].step == store.opt[name].step


def test_save_is_deterministic(tmp_path):
    store = _trained_store()
    save_checkpoint(store, tmp_path / "a.ckpt", meta={"k": 1})
    save_checkpoint(store, tmp_path / "b.ckpt", meta={"k": 1})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_training_resumes_identically(tmp_path):
    # save/load mid-run must not perturb the subsequent trajectory
    rng = nn.make_rng(9)
    grads = [rng.standard_normal((4, 3)).astype(np.float32) for _ in range(6)]

    def run(store, gs):
        for g in gs:
            store["w"].grad = g.copy()
            adamw_step(store, 1e-3, weight_decay=1e-2)
            ema_update(store, 0.9)

    direct = ParamStore()
    direct.add("w", np.ones((4, 3), dtype=np.float32))
    run(direct, grads)

    half = ParamStore()
    half.add("w", np.ones((4, 3), dtype=np.float32))
    run(half, grads[:3])
    save_checkpoint(half, tmp_path / "mid.ckpt")
    resumed, _ = load_checkpoint(tmp_path / "mid.ckpt")
    run(resumed, grads[3:])

    np.testing.assert_array_equal(direct["w"].data, resumed["w"].data)
    np.testing.assert_array_equal(direct.ema["w"], resumed.ema["w"])


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_truncated_file_rejected(tmp_path):
    store = _trained_store()
    path = tmp_path / "model.ckpt"
    save_checkpoint(store, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_empty_meta_default(tmp_path):
    store = _trained_store()
    save_checkpoint(store, tmp_path / "m.ckpt")
    _, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {}


def test_import_weights_renames(tmp_path):
    src = ParamStore()
    src.add("old.w", np.full((2, 2), 7.0, dtype=np.float32))
    save_checkpoint(src, tmp_path / "src.ckpt")

    dst = ParamStore()
    dst.add("new.w", np.zeros((2, 2), dtype=np.float32))
    import_weights(dst, tmp_path / "src.ckpt", {"new.w": "old.w"})
    np.testing.assert_array_equal(dst["new.w"].data, src["old.w"].data)


def test_import_weights_shape_mismatch(tmp_path):
    src = ParamStore()
    src.add("w", np.zeros((2, 2), dtype=np.float32))
    save_checkpoint(src, tmp_path / "src.ckpt")
    dst = ParamStore()
    dst.add("w", np.zeros((3, 3), dtype=np.float32))
    with pytest.raises(CheckpointError):
        import_weights(dst, tmp_path / "src.ckpt", {"w": "w"})
