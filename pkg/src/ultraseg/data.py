"""Dataset ingestion, splitting, ground-truth pyramids and a synthetic generator."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .edges import make_boundary_gt
from .errors import (
    ConfigError,
    DataError,
    EmptyImageError,
    UndecodableImageError,
    UnreadableFileError,
)
from .tensor import DTYPE, Rng

IMAGE_SIZE = 256
SPLITS = ("train", "test")
MANIFEST_HEADER = "#id\timage_path\tmask_path\tsplit\tcenter\tmodality"


@dataclass
class SampleRecord:
    id: str
    image_path: str
    mask_path: str
    split: str = "train"
    center: str | None = None
    modality: str | None = None

    @property
    def tags(self):
        return {k: v for k, v in (("center", self.center), ("modality", self.modality)) if v}


@dataclass
class Manifest:
    records: list = field(default_factory=list)
    seed: int | None = None

    def __len__(self):
        return len(self.records)

    def split(self, name) -> "Manifest":
        return Manifest([r for r in self.records if r.split == name], self.seed)

    def ids(self):
        return [r.id for r in self.records]

    def write(self, path):
        path = Path(path)
        base = path.parent
        lines = [MANIFEST_HEADER if self.seed is None else f"{MANIFEST_HEADER}\tseed={self.seed}"]
        for r in self.records:
            img, msk = (_relative(p, base) for p in (r.image_path, r.mask_path))
            lines.append("\t".join([r.id, img, msk, r.split, r.center or "-", r.modality or "-"]))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise UnreadableFileError(path, exc.strerror or "cannot read manifest") from None
        seed = None
        records, seen = [], set()
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                for part in line[1:].split("\t"):
                    if part.startswith("seed="):
                        seed = int(part[5:])
                continue
            cols = line.split("\t")
            if len(cols) != 6:
                raise DataError(f"{path}:{lineno}: expected 6 tab-separated fields, got {len(cols)}")
            sid, img, msk, split, center, modality = cols
            if split not in SPLITS:
                raise DataError(f"{path}:{lineno}: split must be train or test, got {split!r}")
            if sid in seen:
                raise DataError(f"{path}:{lineno}: duplicate id {sid!r}")
            seen.add(sid)
            records.append(SampleRecord(
                sid, str(_resolve(img, path.parent)), str(_resolve(msk, path.parent)), split,
                None if center == "-" else center, None if modality == "-" else modality))
        return cls(records, seed)


def _relative(p, base):
    try:
        return os.path.relpath(p, base)
    except ValueError:
        return str(p)


def _resolve(p, base):
    p = Path(p)
    return p if p.is_absolute() else base / p


# ------------------------------------------------------------------ image io

def _open(path, mode):
    path = Path(path)
    try:
        if path.stat().st_size == 0:
            raise EmptyImageError(path, "file is empty")
        with open(path, "rb") as fh:
            img = Image.open(fh)
            img.load()
    except (EmptyImageError, UndecodableImageError):
        raise
    except FileNotFoundError:
        raise UnreadableFileError(path, "no such file") from None
    except UnidentifiedImageError:
        raise UndecodableImageError(path, "not a PNG/PPM/PGM image") from None
    except OSError as exc:
        raise UndecodableImageError(path, f"decode failed: {exc}") from None
    if img.width == 0 or img.height == 0:
        raise EmptyImageError(path, "image has zero size")
    if img.mode == "I;16" or img.mode.startswith("I;16"):
        arr = np.asarray(img, dtype=np.float64) / 257.0
        img = Image.fromarray(arr.round().astype(np.uint8))
    return np.asarray(img.convert(mode))


def resize_bilinear(arr, out_h, out_w):
    """Half-pixel-centred bilinear resize of an (H, W, ...) array."""
    a = np.asarray(arr, dtype=np.float64)
    h, w = a.shape[:2]

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    extra = (1,) * (a.ndim - 2)
    fy = fy.reshape((-1, 1) + extra)
    fx = fx.reshape((1, -1) + extra)
    top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
    bot = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_nearest(arr, out_h, out_w):
    a = np.asarray(arr)
    h, w = a.shape[:2]
    ys = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return a[ys][:, xs]


def read_image(path):
    """(1, 3, H, W) float32 in [0, 1] at the file's own resolution."""
    rgb = _open(path, "RGB").astype(np.float32) / 255.0
    return np.ascontiguousarray(rgb.transpose(2, 0, 1)[None])


def prepare_image(path, size=IMAGE_SIZE):
    rgb = _open(path, "RGB")
    h, w = rgb.shape[:2]
    if (h, w) != (size, size):
        rgb = resize_bilinear(rgb, size, size)
    img = np.asarray(rgb, dtype=np.float64) / 255.0
    return np.ascontiguousarray(img.transpose(2, 0, 1)[None], dtype=DTYPE), (h, w)


def prepare_mask(path, size=IMAGE_SIZE):
    gray = _open(path, "L")
    if gray.shape != (size, size):
        gray = resize_nearest(gray, size, size)
    return (gray > 127).astype(DTYPE)[None, None]


def load_sample(record: SampleRecord, size=IMAGE_SIZE):
    image, _ = prepare_image(record.image_path, size)
    return image, prepare_mask(record.mask_path, size)


# ------------------------------------------------------------------ splitting

def split_dataset(records, seed, train_fraction=0.8) -> Manifest:
    records = list(records)
    if len(records) < 2:
        raise ConfigError(f"need at least 2 records to split, got {len(records)}")
    if not 0 < train_fraction < 1:
        raise ConfigError("train_fraction must lie in (0, 1)")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ConfigError("record ids must be unique")
    n_train = int(math.floor(train_fraction * len(records) + 0.5))
    order = Rng(seed).permutation(len(records))
    train = set(order[:n_train].tolist())
    out = []
    for i, r in enumerate(records):
        out.append(SampleRecord(r.id, r.image_path, r.mask_path, "train" if i in train else "test",
                                r.center, r.modality))
    return Manifest(out, seed)


# ------------------------------------------------------------------ pyramids

@dataclass
class GtPyramid:
    """Binary targets keyed by stride (1 = full resolution)."""

    region: dict
    boundary: dict


def downsample_nearest(mask, factor):
    """Nearest-neighbour decimation: output[i, j] = mask[i * factor, j * factor]."""
    return np.ascontiguousarray(mask[..., ::factor, ::factor])


def build_pyramid(mask, boundary=None, region_levels=(2, 4, 8, 16), boundary_levels=(4, 8, 16)) -> GtPyramid:
    """Targets for every supervised resolution. ``mask`` is (N, 1, H, W)."""
    mask = np.asarray(mask, dtype=DTYPE)
    if boundary is None:
        boundary = np.stack([make_boundary_gt(m[0])[None] for m in mask]).astype(DTYPE)
    boundary = np.asarray(boundary, dtype=DTYPE)
    region = {1: mask}
    for s in region_levels:
        region[s] = downsample_nearest(mask, s)
    bnd = {1: boundary}
    for s in boundary_levels:
        bnd[s] = downsample_nearest(boundary, s)
    return GtPyramid(region, bnd)


def stack_pyramids(pyramids) -> GtPyramid:
    first = pyramids[0]
    region = {s: np.concatenate([p.region[s] for p in pyramids]) for s in first.region}
    boundary = {s: np.concatenate([p.boundary[s] for p in pyramids]) for s in first.boundary}
    return GtPyramid(region, boundary)


# ------------------------------------------------------------------ loading

@dataclass
class Sample:
    id: str
    image: np.ndarray
    pyramid: GtPyramid
    tags: dict


def load_prepared(records, workers=1):
    """Load samples with their target pyramids; result follows ``records`` order."""

    def one(r):
        image, mask = load_sample(r)
        return Sample(r.id, image, build_pyramid(mask), r.tags)

    records = list(records)
    if workers <= 1:
        return [one(r) for r in records]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, records))


# ------------------------------------------------------------------ synthesis

def _low_freq_noise(rng, size, cells=8):
    coarse = rng.uniform(cells * cells * 3).reshape(cells, cells, 3)
    return resize_bilinear(coarse, size, size)


def synth_sample(seed, index, size=IMAGE_SIZE):
    """One image (H, W, 3) uint8 and mask (H, W) uint8 in {0, 255}."""
    rng = Rng(seed).fork(index + 1)
    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    for _attempt in range(64):
        k = int(rng.integers(1, 3)[0]) + 1
        union = np.zeros((size, size), dtype=bool)
        shade = np.zeros((size, size))
        alpha = np.zeros((size, size))
        for _ in range(k):
            cy, cx = rng.uniform(2, 0.2 * size, 0.8 * size)
            a, b = rng.uniform(2, 0.06 * size, 0.2 * size)
            theta = rng.uniform(1, 0, np.pi)[0]
            c, s = math.cos(theta), math.sin(theta)
            u = ((xx - cx) * c + (yy - cy) * s) / a
            v = (-(xx - cx) * s + (yy - cy) * c) / b
            r = np.sqrt(u * u + v * v)
            union |= r <= 1.0
            # soft rim: alpha falls from 1 to 0 across r in [0.9, 1.1]
            alpha = np.maximum(alpha, np.clip((1.1 - r) / 0.2, 0, 1))
            shade = np.maximum(shade, np.clip(1.0 - 0.5 * r * r, 0, 1))
        frac = union.mean()
        if 0.01 <= frac <= 0.40:
            break
    else:  # pragma: no cover - bounds make this practically unreachable
        raise DataError(f"synthetic sample {index}: could not place polyps within coverage bounds")
    bg_tint = rng.uniform(3, 0.35, 0.6)
    polyp_tint = rng.uniform(3, 0.65, 0.95)
    bg = 0.6 * bg_tint + 0.4 * _low_freq_noise(rng, size) * bg_tint
    fg = polyp_tint * (0.55 + 0.45 * shade[..., None])
    img = bg * (1 - alpha[..., None]) + fg * alpha[..., None]
    img += 0.03 * rng.normal(size * size * 3).reshape(size, size, 3)
    img = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    return img, union.astype(np.uint8) * 255


def synth_dataset(n, seed, out_dir, train_fraction=0.8) -> Manifest:
    """Write ``n`` synthetic image/mask pairs plus ``manifest.tsv`` under ``out_dir``."""
    if n < 2:
        raise ConfigError(f"synth_dataset needs n >= 2, got {n}")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UnreadableFileError(out, f"cannot create output directory: {exc.strerror}") from None
    records = []
    for i in range(n):
        img, mask = synth_sample(seed, i)
        sid = f"synth_{i:04d}"
        ip, mp = out / "images" / f"{sid}.png", out / "masks" / f"{sid}.png"
        try:
            Image.fromarray(img, "RGB").save(ip, format="PNG")
            Image.fromarray(mask, "L").save(mp, format="PNG")
        except OSError as exc:
            raise UnreadableFileError(ip, f"cannot write: {exc}") from None
        records.append(SampleRecord(sid, str(ip), str(mp), "train", f"center{i % 2}", None))
    manifest = split_dataset(records, seed, train_fraction)
    manifest.write(out / "manifest.tsv")
    return manifest
