"""Six-channel heatmap samples: file format, manifests, augmentation, toy data.

A sample holds six H x W channels in [0,1], in fixed order:
cell_density, macro_region, rudy, ir_drop, power, scaled_power.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .nn.rng import make_rng

SAMPLE_MAGIC = b"DALIPD01"
CHANNEL_NAMES = (
    "cell_density",
    "macro_region",
    "rudy",
    "ir_drop",
    "power",
    "scaled_power",
)
NUM_CHANNELS = 6
# physical pitch of one pixel; metadata only, nothing geometric depends on it
PIXEL_PITCH_UM = 2.25


class DataError(ValueError):
    """Malformed sample file, manifest, or out-of-contract values."""


Box = tuple[float, float, float, float]


@dataclass
class CircuitParams:
    """Conditioning inputs: clock period (ns), utilization, size, macro boxes.

    Boxes are (x_l, y_l, x_u, y_u) in normalized [0,1] coordinates with
    x_l < x_u and y_l < y_u.
    """

    clock_period: float
    utilization: float
    height: int
    width: int
    macros: list[Box] = field(default_factory=list)

    @property
    def macro_count(self) -> int:
        return len(self.macros)

    def validate(self) -> None:
        if not (self.clock_period > 0):
            raise DataError(f"clock_period must be positive, got {self.clock_period}")
        if not (0.0 <= self.utilization <= 1.0):
            raise DataError(f"utilization outside [0,1]: {self.utilization}")
        if self.height <= 0 or self.width <= 0:
            raise DataError("height and width must be positive")
        for b in self.macros:
            x_l, y_l, x_u, y_u = b
            if not (x_l < x_u and y_l < y_u):
                raise DataError(f"degenerate macro box {b}")
            if min(b) < 0.0 or max(b) > 1.0:
                raise DataError(f"macro box outside [0,1]: {b}")


@dataclass
class HeatmapSet:
    """channels: float32 array (6, H, W), values in [0,1]."""

    channels: np.ndarray
    params: CircuitParams
    id: str

    def validate(self) -> None:
        c = self.channels
        if c.ndim != 3 or c.shape[0] != NUM_CHANNELS:
            raise DataError(f"expected (6, H, W) channels, got {c.shape}")
        if c.shape[1] != self.params.height or c.shape[2] != self.params.width:
            raise DataError(
                f"channel shape {c.shape[1:]} does not match params "
                f"({self.params.height}, {self.params.width})"
            )
        if c.dtype != np.float32:
            raise DataError(f"channels must be float32, got {c.dtype}")
        lo = float(c.min()) if c.size else 0.0
        hi = float(c.max()) if c.size else 0.0
        if lo < 0.0 or hi > 1.0:
            raise DataError(f"channel values outside [0,1]: min={lo}, max={hi}")
        self.params.validate()

    def channel(self, name: str) -> np.ndarray:
        if name not in CHANNEL_NAMES:
            raise DataError(f"unknown channel {name!r}")
        return self.channels[CHANNEL_NAMES.index(name)]


@dataclass
class ManifestEntry:
    id: str
    path: str
    split: str
    clock_period: float
    utilization: float
    height: int
    width: int
    num_macros: int


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    version: str = "1"

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def ids(self) -> list[str]:
        return [e.id for e in self.entries]


def _params_blob(params: CircuitParams, sample_id: str) -> bytes:
    payload = {
        "id": sample_id,
        "clock_period": params.clock_period,
        "utilization": params.utilization,
        "height": params.height,
        "width": params.width,
        "macros": [list(b) for b in params.macros],
    }
    return json.dumps(payload, sort_keys=True).encode("utf-8")


def save_sample(sample: HeatmapSet, path: str) -> None:
    sample.validate()
    c = np.ascontiguousarray(sample.channels, dtype=np.float32)
    blob = _params_blob(sample.params, sample.id)
    with open(path, "wb") as f:
        f.write(SAMPLE_MAGIC)
        f.write(struct.pack("<III", sample.params.height, sample.params.width, NUM_CHANNELS))
        f.write(c.astype("<f4").tobytes())
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)


def load_sample(path: str) -> HeatmapSet:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(SAMPLE_MAGIC)] != SAMPLE_MAGIC:
        raise DataError(f"bad magic in {path!r}")
    off = len(SAMPLE_MAGIC)
    h, w, nc = struct.unpack_from("<III", raw, off)
    off += 12
    if nc != NUM_CHANNELS:
        raise DataError(f"expected {NUM_CHANNELS} channels, file has {nc}")
    count = nc * h * w
    end = off + 4 * count
    if end > len(raw):
        raise DataError("truncated sample file")
    channels = np.frombuffer(raw[off:end], dtype="<f4").reshape(nc, h, w).copy()
    off = end
    (blob_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    payload = json.loads(raw[off : off + blob_len].decode("utf-8"))
    params = CircuitParams(
        clock_period=payload["clock_period"],
        utilization=payload["utilization"],
        height=payload["height"],
        width=payload["width"],
        macros=[tuple(b) for b in payload["macros"]],
    )
    sample = HeatmapSet(channels=channels, params=params, id=payload["id"])
    sample.validate()
    return sample


def save_manifest(manifest: DatasetManifest, path: str) -> None:
    base = os.path.dirname(os.path.abspath(path))
    rows = []
    for e in manifest.entries:
        p = os.path.relpath(os.path.abspath(e.path), base)
        rows.append(
            {
                "id": e.id,
                "path": p,
                "split": e.split,
                "clock_period": e.clock_period,
                "utilization": e.utilization,
                "height": e.height,
                "width": e.width,
                "num_macros": e.num_macros,
            }
        )
    with open(path, "w", encoding="utf-8") as f:
        json.dump(rows, f, sort_keys=True, indent=1)
        f.write("\n")


def load_manifest(path: str, check_files: bool = True) -> DatasetManifest:
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8") as f:
        rows = json.load(f)
    if not isinstance(rows, list):
        raise DataError("manifest must be a JSON array")
    entries = []
    seen = set()
    for r in rows:
        e = ManifestEntry(
            id=r["id"],
            path=os.path.normpath(os.path.join(base, r["path"])),
            split=r["split"],
            clock_period=r["clock_period"],
            utilization=r["utilization"],
            height=r["height"],
            width=r["width"],
            num_macros=r["num_macros"],
        )
        if e.id in seen:
            raise DataError(f"duplicate id in manifest: {e.id}")
        seen.add(e.id)
        if check_files and not os.path.exists(e.path):
            raise DataError(f"manifest references missing file {e.path}")
        entries.append(e)
    return DatasetManifest(entries=entries)


def manifest_entry_for(sample: HeatmapSet, path: str, split: str) -> ManifestEntry:
    p = sample.params
    return ManifestEntry(
        id=sample.id,
        path=path,
        split=split,
        clock_period=p.clock_period,
        utilization=p.utilization,
        height=p.height,
        width=p.width,
        num_macros=p.macro_count,
    )


def load_samples(manifest: DatasetManifest) -> list[HeatmapSet]:
    return [load_sample(e.path) for e in manifest.entries]


# ---------------------------------------------------------------------------
# rasterization


def rasterize_bboxes(boxes, height: int, width: int) -> np.ndarray:
    """Binary (H, W) mask: 1 inside any box. Pixel edges at round(coord*extent)."""
    mask = np.zeros((height, width), dtype=np.float32)
    for x_l, y_l, x_u, y_u in boxes:
        r0 = int(round(y_l * height))
        r1 = int(round(y_u * height))
        c0 = int(round(x_l * width))
        c1 = int(round(x_u * width))
        mask[r0:r1, c0:c1] = 1.0
    return mask


# ---------------------------------------------------------------------------
# augmentation

# index 1 is the 180-degree rotation; 2..7 cover the remaining dihedral
# actions; 8..11 are circular translations by +-H/8 rows / +-W/8 columns
_DIHEDRAL = {1, 2, 3, 4, 5, 6, 7}


def _flip_x(boxes):
    return [(1.0 - xu, yl, 1.0 - xl, yu) for xl, yl, xu, yu in boxes]


def _flip_y(boxes):
    return [(xl, 1.0 - yu, xu, 1.0 - yl) for xl, yl, xu, yu in boxes]


def _swap_xy(boxes):
    return [(yl, xl, yu, xu) for xl, yl, xu, yu in boxes]


def _shift_boxes(boxes, dx: float, dy: float):
    """Shift modulo 1; a box crossing the wrap line splits into two boxes."""
    out = []
    for xl, yl, xu, yu in boxes:
        spans_x = [(xl + dx, xu + dx)]
        pieces = []
        for a, b in spans_x:
            a_m, b_m = a % 1.0, b % 1.0
            if b_m == 0.0:
                b_m = 1.0
            if a_m < b_m:
                pieces.append((a_m, b_m))
            else:
                pieces.append((a_m, 1.0))
                pieces.append((0.0, b_m))
        for px_l, px_u in pieces:
            a, b = yl + dy, yu + dy
            a_m, b_m = a % 1.0, b % 1.0
            if b_m == 0.0:
                b_m = 1.0
            if a_m < b_m:
                out.append((px_l, a_m, px_u, b_m))
            else:
                out.append((px_l, a_m, px_u, 1.0))
                out.append((px_l, 0.0, px_u, b_m))
    return out


def augment(sample: HeatmapSet, index: int) -> HeatmapSet:
    """Deterministic label-consistent transform; index in 1..11.

    1 rot180, 2 rot90, 3 rot270, 4 horizontal flip, 5 vertical flip,
    6 transpose, 7 anti-transpose, 8/9 circular roll by +-H/8 rows,
    10/11 circular roll by +-W/8 columns. 90-degree actions on non-square
    samples swap H and W in the params.
    """
    if not 1 <= index <= 11:
        raise DataError(f"augment index must be in 1..11, got {index}")
    c = sample.channels
    p = sample.params
    h, w = p.height, p.width
    boxes = list(p.macros)
    new_h, new_w = h, w
    if index == 1:
        c2 = c[:, ::-1, ::-1]
        boxes = _flip_x(_flip_y(boxes))
    elif index == 2:
        c2 = np.rot90(c, 1, axes=(1, 2))
        boxes = _swap_xy(_flip_x(boxes))  # (x,y) -> (y, 1-x)
        new_h, new_w = w, h
    elif index == 3:
        c2 = np.rot90(c, 3, axes=(1, 2))
        boxes = _swap_xy(_flip_y(boxes))  # (x,y) -> (1-y, x)
        new_h, new_w = w, h
    elif index == 4:
        c2 = c[:, :, ::-1]
        boxes = _flip_x(boxes)
    elif index == 5:
        c2 = c[:, ::-1, :]
        boxes = _flip_y(boxes)
    elif index == 6:
        c2 = np.swapaxes(c, 1, 2)
        boxes = _swap_xy(boxes)
        new_h, new_w = w, h
    elif index == 7:
        c2 = np.swapaxes(c[:, ::-1, ::-1], 1, 2)
        boxes = _swap_xy(_flip_x(_flip_y(boxes)))
        new_h, new_w = w, h
    else:
        dr = max(1, h // 8)
        dc = max(1, w // 8)
        if index == 8:
            c2 = np.roll(c, dr, axis=1)
            boxes = _shift_boxes(boxes, 0.0, dr / h)
        elif index == 9:
            c2 = np.roll(c, -dr, axis=1)
            boxes = _shift_boxes(boxes, 0.0, -dr / h)
        elif index == 10:
            c2 = np.roll(c, dc, axis=2)
            boxes = _shift_boxes(boxes, dc / w, 0.0)
        else:
            c2 = np.roll(c, -dc, axis=2)
            boxes = _shift_boxes(boxes, -dc / w, 0.0)
    params = replace(p, height=new_h, width=new_w, macros=boxes)
    return HeatmapSet(
        channels=np.ascontiguousarray(c2), params=params, id=f"{sample.id}-aug{index}"
    )


# ---------------------------------------------------------------------------
# splitting


def _design_of(entry_id: str, designs) -> str | None:
    for d in designs:
        if entry_id == d or entry_id.startswith(d + "-"):
            return d
    return None


def split_dataset(
    manifest: DatasetManifest,
    held_out_designs,
    held_out_param_options=None,
) -> tuple[DatasetManifest, DatasetManifest]:
    """Held-out designs form the test set; train drops entries whose
    clock_period/utilization matches a held-out option value."""
    held_out_designs = list(held_out_designs)
    opts = held_out_param_options or {}
    bad_keys = set(opts) - {"clock_period", "utilization"}
    if bad_keys:
        raise DataError(f"unknown parameter categories: {sorted(bad_keys)}")
    train, test = [], []
    for e in manifest.entries:
        if _design_of(e.id, held_out_designs) is not None:
            test.append(replace(e, split="test"))
            continue
        held = False
        for key, values in opts.items():
            v = getattr(e, key)
            if any(np.isclose(v, float(x)) for x in values):
                held = True
                break
        if not held:
            train.append(replace(e, split="train"))
    if not test:
        raise DataError("empty test split: no entries match held-out designs")
    if not train:
        raise DataError("empty train split after removing held-out options")
    return DatasetManifest(entries=train), DatasetManifest(entries=test)


# ---------------------------------------------------------------------------
# toy data


def sample_layout_boxes(rng, m: int, u: float, aspect_bounds=(0.5, 2.0), gap=0.02):
    """m non-overlapping normalized boxes with pairwise gap >= ``gap``.

    Total area is drawn uniformly from [0.1, min(0.4, 1-u)] and split across
    boxes by uniform shares; placement is rejection sampling, largest box
    first, with a 1000-try cap per box. Toy data and generation requests both
    draw from this law, so the conditioning seen at sampling time matches the
    training distribution.
    """
    if m < 0:
        raise DataError("macro_count must be >= 0")
    if m == 0:
        return []
    hi = min(0.4, 1.0 - u)
    if hi < 0.1:
        raise DataError(
            f"infeasible: utilization {u} leaves no room for the 0.1 minimum macro area"
        )
    target = float(rng.uniform(0.1, hi))
    shares = rng.uniform(0.5, 1.5, size=m)
    areas = np.sort(target * shares / shares.sum())[::-1]
    boxes: list[Box] = []
    for a in areas:
        for _ in range(1000):
            aspect = float(rng.uniform(*aspect_bounds))
            bw = min(float(np.sqrt(a * aspect)), 1.0)
            bh = a / bw
            if bh > 1.0:
                continue
            xl = float(rng.uniform(0.0, 1.0 - bw))
            yl = float(rng.uniform(0.0, 1.0 - bh))
            cand = (xl, yl, xl + bw, yl + bh)
            ok = True
            for xl2, yl2, xu2, yu2 in boxes:
                if (
                    cand[0] < xu2 + gap
                    and cand[2] > xl2 - gap
                    and cand[1] < yu2 + gap
                    and cand[3] > yl2 - gap
                ):
                    ok = False
                    break
            if ok:
                boxes.append(cand)
                break
        else:
            raise DataError(
                f"infeasible: box {len(boxes) + 1}/{m} not placed after 1000 tries"
            )
    return boxes


def make_toy_sample(index: int, height: int, width: int, seed: int) -> HeatmapSet:
    """One procedural sample; deterministic in (index, seed)."""
    rng = make_rng(seed, index)
    u = float(rng.uniform(0.25, 0.75))
    clock = float(rng.uniform(1.0, 10.0))
    n_macros = int(rng.integers(1, 4))
    boxes = None
    for _ in range(100):  # unlucky large-area draws can exhaust the placer
        try:
            boxes = sample_layout_boxes(rng, n_macros, u)
            break
        except DataError:
            continue
    if boxes is None:
        raise DataError(f"toy sample {index}: no feasible macro layout found")
    macro = rasterize_bboxes(boxes, height, width)
    outside = macro == 0.0

    sigma = max(1.0, min(height, width) / 12.0)
    noise = gaussian_filter(rng.standard_normal((height, width)), sigma)
    noise = noise / max(noise.std(), 1e-12)
    density = u + 0.08 * noise
    density = np.clip(density, 0.0, 1.0)
    density[~outside] = 0.0
    # pin the non-macro mean to u so utilization is exactly recoverable
    m = density[outside].mean()
    density[outside] = np.clip(density[outside] + (u - m), 0.0, 1.0)

    s_p = float(rng.uniform(0.5, 0.9))
    pedestal = float(rng.uniform(0.3, 0.6))
    power = s_p * density
    power[~outside] = pedestal
    toggle = float(rng.uniform(0.2, 1.0))
    scaled = power * toggle

    band = gaussian_filter(macro, 1.5)
    band = 4.0 * band * (1.0 - band)
    rudy = gaussian_filter(density, 2.0) + 0.2 * band

    ir = gaussian_filter(power, max(1.0, min(height, width) / 10.0))
    ir = ir / max(float(ir.max()), 1e-12)

    channels = np.stack([density, macro, rudy, ir, power, scaled]).astype(np.float32)
    channels = np.clip(channels, 0.0, 1.0)
    params = CircuitParams(
        clock_period=clock,
        utilization=u,
        height=height,
        width=width,
        macros=boxes,
    )
    return HeatmapSet(channels=channels, params=params, id=f"toy{index:05d}")


def make_toy_dataset(
    n: int, height: int, width: int, seed: int, out_dir: str, split: str = "train"
) -> DatasetManifest:
    """Write n procedural samples plus manifest.json into out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i in range(n):
        s = make_toy_sample(i, height, width, seed)
        path = os.path.join(out_dir, f"{s.id}.dalipd")
        save_sample(s, path)
        entries.append(manifest_entry_for(s, path, split))
    manifest = DatasetManifest(entries=entries)
    save_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest
