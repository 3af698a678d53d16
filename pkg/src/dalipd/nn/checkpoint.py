"""Binary checkpoint format for parameter stores.

Layout (all integers little-endian):

    magic   b"DALI-CKPT1"
    u32     length of UTF-8 JSON metadata blob, then the blob
    section parameters
    section optimizer state   (entries "<name>.exp_avg", ".exp_avg_sq", ".step")
    section EMA shadows

Each section is a u32 entry count followed by entries of
(u16 name length, name, u8 ndim, u32 extents..., u8 dtype code,
u64 value count, raw little-endian values). Dtype codes: 0=f32, 1=f64, 2=i64.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .optim import ParamStore

MAGIC = b"DALI-CKPT1"
FORMAT_NAME = "DALI-CKPT1"

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


class CheckpointError(ValueError):
    pass


def _write_entry(buf: bytearray, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    code = _CODE_FOR.get(np.dtype(arr.dtype))
    if code is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for entry {name!r}")
    buf += struct.pack("<H", len(nb)) + nb
    buf += struct.pack("<B", arr.ndim)
    for extent in arr.shape:
        buf += struct.pack("<I", extent)
    buf += struct.pack("<B", code)
    buf += struct.pack("<Q", arr.size)
    buf += np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()


def _write_section(buf: bytearray, entries: list[tuple[str, np.ndarray]]) -> None:
    buf += struct.pack("<I", len(entries))
    for name, arr in entries:
        _write_entry(buf, name, arr)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def entry(self) -> tuple[str, np.ndarray]:
        name = self.take(self.u16()).decode("utf-8")
        ndim = self.u8()
        shape = tuple(self.u32() for _ in range(ndim))
        code = self.u8()
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"unknown dtype code {code}")
        count = self.u64()
        expected = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if count != expected:
            raise CheckpointError(f"entry {name!r}: count {count} != shape product {expected}")
        dt = _DTYPE_CODES[code]
        arr = np.frombuffer(self.take(count * dt.itemsize), dtype=dt).reshape(shape)
        return name, arr.copy()

    def section(self) -> dict[str, np.ndarray]:
        return dict(self.entry() for _ in range(self.u32()))


def save_checkpoint(store: ParamStore, path, meta: dict | None = None) -> None:
    buf = bytearray(MAGIC)
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf += struct.pack("<I", len(meta_bytes)) + meta_bytes
    _write_section(buf, [(n, t.data) for n, t in store.items()])
    opt_entries: list[tuple[str, np.ndarray]] = []
    for name in store.names():
        st = store.opt[name]
        opt_entries.append((f"{name}.exp_avg", st.exp_avg))
        opt_entries.append((f"{name}.exp_avg_sq", st.exp_avg_sq))
        opt_entries.append((f"{name}.step", np.asarray(st.step, dtype=np.int64)))
    _write_section(buf, opt_entries)
    _write_section(buf, [(n, store.ema[n]) for n in store.names()])
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    r = _Reader(blob)
    r.pos = len(MAGIC)
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    params = r.section()
    opt = r.section()
    ema = r.section()
    store = ParamStore()
    for name, arr in params.items():
        store.add(name, arr)
        st = store.opt[name]
        st.exp_avg = opt[f"{name}.exp_avg"]
        st.exp_avg_sq = opt[f"{name}.exp_avg_sq"]
        st.step = int(opt[f"{name}.step"])
        if st.exp_avg.shape != arr.shape or st.exp_avg_sq.shape != arr.shape:
            raise CheckpointError(f"optimizer state shape mismatch for {name!r}")
        shadow = ema[name]
        if shadow.shape != arr.shape:
            raise CheckpointError(f"EMA shape mismatch for {name!r}")
        store.ema[name] = shadow
    return store, meta


def import_weights(store: ParamStore, path, name_map: dict[str, str]) -> None:
    """Load externally trained weights into ``store`` via a name-mapping table.

    ``name_map`` maps every parameter name in the store to the entry name in
    the external checkpoint; a missing mapping or shape mismatch is an error.
    Both the parameter and its EMA shadow are overwritten.
    """
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    r = _Reader(blob)
    r.pos = len(MAGIC)
    r.take(r.u32())  # skip metadata
    external = r.section()
    for name, t in store.items():
        if name not in name_map:
            raise CheckpointError(f"no mapping entry for parameter {name!r}")
        ext_name = name_map[name]
        if ext_name not in external:
            raise CheckpointError(f"external checkpoint lacks entry {ext_name!r}")
        arr = external[ext_name]
        if arr.shape != t.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: store {t.shape}, external {arr.shape}"
            )
        t.data[...] = arr.astype(t.dtype)
        store.ema[name][...] = t.data
