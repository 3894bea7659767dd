"""Surface-defect image data: NEU-format loading, the deterministic
240/60-per-class split, and a seeded synthetic 6-class generator.

The synthetic generator renders one defect phenotype per class on a noisy
steel-like background and keeps a binary ground-truth mask per image so the
attribution audit has something objective to score against. Generation is
byte-deterministic for a fixed seed.
"""

from __future__ import annotations

import io
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CLASS_NAMES = (
    "crazing",
    "inclusion",
    "patches",
    "pitted_surface",
    "rolled_in_scale",
    "scratches",
)
CLASS_PREFIXES = ("Cr", "In", "Pa", "PS", "RS", "Sc")
_PREFIX_TO_LABEL = {p.lower(): i for i, p in enumerate(CLASS_PREFIXES)}
_NAME_TO_LABEL = {n: i for i, n in enumerate(CLASS_NAMES)}

RASTER_EXTS = {".bmp", ".png", ".jpg", ".jpeg", ".pgm", ".tif", ".tiff", ".gif"}


class DataError(ValueError):
    pass


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (H, W) float32 in [0, 1]
    label: int
    source_id: str
    mask: np.ndarray | None = None  # (H, W) uint8 in {0, 1}, synthetic only


@dataclass
class DatasetSplit:
    train: list[LabeledImage]
    test: list[LabeledImage]
    class_names: tuple[str, ...] = CLASS_NAMES


def images_to_arrays(images) -> tuple[np.ndarray, np.ndarray]:
    """(N, H, W, 1) float32 pixels and (N,) int64 labels."""
    x = np.stack([im.pixels for im in images])[..., None].astype(np.float32)
    y = np.array([im.label for im in images], np.int64)
    return x, y


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Center-aligned bilinear resampling of a 2-D array."""
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.astype(np.float32)
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0, 1)[:, None]
    wx = np.clip(xs - x0, 0, 1)[None, :]
    a = img[np.ix_(y0, x0)]
    b = img[np.ix_(y0, x1)]
    c = img[np.ix_(y1, x0)]
    d = img[np.ix_(y1, x1)]
    out = (1 - wy) * ((1 - wx) * a + wx * b) + wy * ((1 - wx) * c + wx * d)
    return out.astype(np.float32)


# --------------------------------------------------------------------------
# loading
# --------------------------------------------------------------------------

def _label_from_filename(name: str) -> int:
    prefix = name.split("_", 1)[0].lower()
    if prefix not in _PREFIX_TO_LABEL:
        raise DataError(f"unknown class prefix '{prefix}' in file '{name}'")
    return _PREFIX_TO_LABEL[prefix]


def _label_from_dirname(name: str) -> int | None:
    low = name.lower().replace("-", "_").replace(" ", "_")
    if low in _NAME_TO_LABEL:
        return _NAME_TO_LABEL[low]
    if low in _PREFIX_TO_LABEL:
        return _PREFIX_TO_LABEL[low]
    return None


def _decode_image(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), np.float32) / 255.0
    return arr


def load_neu(directory, size: int = 200) -> list[LabeledImage]:
    """Load a NEU-style directory: either one subdirectory per class, or flat
    files named Cr_*/In_*/Pa_*/PS_*/RS_*/Sc_*. Pixels are normalized to
    [0, 1] and bilinearly resized to ``size`` when needed. Undecodable files
    are reported and skipped; mask/manifest files are ignored."""
    root = Path(directory)
    if not root.is_dir():
        raise DataError(f"'{root}' is not a directory")

    pending: list[tuple[Path, int]] = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        label = _label_from_dirname(sub.name)
        if label is None:
            continue
        for f in sorted(sub.iterdir()):
            if f.suffix.lower() in RASTER_EXTS and "_mask" not in f.stem:
                pending.append((f, label))
    for f in sorted(p for p in root.iterdir() if p.is_file()):
        if f.suffix.lower() not in RASTER_EXTS or "_mask" in f.stem:
            continue
        pending.append((f, _label_from_filename(f.name)))

    if not pending:
        raise DataError(f"no images found under '{root}'")
    images = []
    for path, label in pending:
        try:
            arr = _decode_image(path)
        except Exception as exc:  # corrupt file: report, keep loading
            warnings.warn(f"skipping undecodable image '{path}': {exc}")
            continue
        if arr.shape != (size, size):
            arr = bilinear_resize(arr, size, size)
        images.append(LabeledImage(pixels=np.clip(arr, 0.0, 1.0), label=label, source_id=path.stem))
    if not images:
        raise DataError(f"no decodable images under '{root}'")
    return images


def split_neu(images: list[LabeledImage], train_per_class: int = 240, test_per_class: int = 60,
              fallback_ratio: float = 0.8) -> DatasetSplit:
    """Deterministic split: per class, sort source ids lexicographically and
    take the first 240 for training and the next 60 for testing. Classes
    smaller than 300 fall back to an 80/20 split."""
    by_class: dict[int, list[LabeledImage]] = {}
    for im in images:
        by_class.setdefault(im.label, []).append(im)
    for label, group in by_class.items():
        if len(group) < 2:
            raise DataError(f"class '{CLASS_NAMES[label]}' has fewer than 2 images")
    protocol = all(len(g) >= train_per_class + test_per_class for g in by_class.values())
    train: list[LabeledImage] = []
    test: list[LabeledImage] = []
    for label in sorted(by_class):
        group = sorted(by_class[label], key=lambda im: im.source_id)
        if protocol:
            train.extend(group[:train_per_class])
            test.extend(group[train_per_class : train_per_class + test_per_class])
        else:
            cut = int(len(group) * fallback_ratio)
            cut = min(max(cut, 1), len(group) - 1)
            train.extend(group[:cut])
            test.extend(group[cut:])
    return DatasetSplit(train=train, test=test)


def mean_std(images: list[LabeledImage]) -> tuple[float, float]:
    """Scalar mean and population std over every pixel of every image."""
    if not images:
        raise DataError("mean_std of an empty image list")
    flat = np.concatenate([im.pixels.ravel() for im in images])
    return float(flat.mean()), float(flat.std())


# --------------------------------------------------------------------------
# synthetic defect rendering
# --------------------------------------------------------------------------

def _noise_field(rng, size: int, cells: int, lo: float, hi: float) -> np.ndarray:
    coarse = rng.uniform(lo, hi, (cells, cells))
    return bilinear_resize(coarse.astype(np.float32), size, size)


def _background(rng, size: int) -> np.ndarray:
    img = _noise_field(rng, size, 8, 0.38, 0.58)
    img += rng.normal(0.0, 0.02, (size, size)).astype(np.float32)
    return img


def _segment_mask(size: int, p0, p1, width: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    ax, ay = p0
    bx, by = p1
    dx, dy = bx - ax, by - ay
    den = max(dx * dx + dy * dy, 1e-6)
    t = np.clip(((xx - ax) * dx + (yy - ay) * dy) / den, 0.0, 1.0)
    dist = np.hypot(xx - (ax + t * dx), yy - (ay + t * dy))
    return dist <= width


def _disk_mask(size: int, cx, cy, r) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def _ellipse_mask(size: int, cx, cy, a, b, theta) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    ct, st = np.cos(theta), np.sin(theta)
    u = (xx - cx) * ct + (yy - cy) * st
    v = -(xx - cx) * st + (yy - cy) * ct
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _render_scratches(rng, size):
    img = _background(rng, size)
    mask = np.zeros((size, size), bool)
    for _ in range(int(rng.integers(2, 5))):
        p0 = rng.uniform(0.08 * size, 0.92 * size, 2)
        angle = rng.uniform(0, np.pi)
        length = rng.uniform(0.35, 0.75) * size
        p1 = p0 + length * np.array([np.cos(angle), np.sin(angle)])
        p1 = np.clip(p1, 2, size - 3)
        width = float(rng.uniform(0.8, 1.8)) * size / 64.0
        seg = _segment_mask(size, p0, p1, width)
        delta = float(rng.choice([-1, 1]) * rng.uniform(0.3, 0.45))
        img[seg] += delta
        mask |= seg
    return img, mask


def _render_inclusion(rng, size):
    img = _background(rng, size)
    mask = np.zeros((size, size), bool)
    for _ in range(int(rng.integers(2, 4))):
        cx, cy = rng.uniform(0.15 * size, 0.85 * size, 2)
        a = rng.uniform(0.10, 0.22) * size
        b = rng.uniform(0.03, 0.06) * size
        blob = _ellipse_mask(size, cx, cy, a, b, rng.uniform(0, np.pi))
        img[blob] -= float(rng.uniform(0.3, 0.45))
        mask |= blob
    return img, mask


def _render_patches(rng, size):
    img = _background(rng, size)
    mask = np.zeros((size, size), bool)
    for _ in range(int(rng.integers(1, 3))):
        cx, cy = rng.uniform(0.25 * size, 0.75 * size, 2)
        field = _noise_field(rng, size, 6, -1.0, 1.0)
        region = (field > 0.15) & _disk_mask(size, cx, cy, rng.uniform(0.18, 0.32) * size)
        if not region.any():
            region = _disk_mask(size, cx, cy, 0.15 * size)
        img[region] += float(rng.choice([-1, 1]) * rng.uniform(0.18, 0.3))
        mask |= region
    return img, mask


def _render_pitted(rng, size):
    img = _background(rng, size)
    mask = np.zeros((size, size), bool)
    count = int(rng.integers(35, 75) * (size / 64.0) ** 2)
    for _ in range(count):
        cx, cy = rng.uniform(2, size - 2, 2)
        pit = _disk_mask(size, cx, cy, rng.uniform(0.8, 2.0) * size / 64.0)
        img[pit] -= float(rng.uniform(0.25, 0.4))
        mask |= pit
    return img, mask


def _render_rolled(rng, size):
    img = _background(rng, size)
    overlay = _noise_field(rng, size, max(size // 6, 4), -1.0, 1.0)
    img += 0.16 * overlay
    mask = overlay > 0.25
    if not mask.any():
        mask = overlay > overlay.mean()
    return img, mask


def _render_crazing(rng, size):
    img = _background(rng, size)
    mask = np.zeros((size, size), bool)
    base_angle = rng.uniform(0, np.pi)
    for angle in (base_angle, base_angle + np.pi / 2 + rng.uniform(-0.2, 0.2)):
        for _ in range(int(rng.integers(4, 8))):
            p0 = rng.uniform(0, size, 2)
            length = rng.uniform(0.4, 1.0) * size
            p1 = p0 + length * np.array([np.cos(angle), np.sin(angle)])
            seg = _segment_mask(size, p0, np.clip(p1, 0, size - 1), 0.6 * size / 64.0)
            img[seg] -= 0.22
            mask |= seg
    return img, mask


_RENDERERS = {
    "crazing": _render_crazing,
    "inclusion": _render_inclusion,
    "patches": _render_patches,
    "pitted_surface": _render_pitted,
    "rolled_in_scale": _render_rolled,
    "scratches": _render_scratches,
}


def synth(per_class: int, size: int, seed: int = 0) -> DatasetSplit:
    """Procedural 6-class defect dataset with ground-truth masks, split 80/20
    per class. Byte-deterministic for a fixed seed."""
    if per_class < 2:
        raise DataError("per_class must be >= 2")
    train: list[LabeledImage] = []
    test: list[LabeledImage] = []
    cut = int(per_class * 0.8)
    cut = min(max(cut, 1), per_class - 1)
    for label, name in enumerate(CLASS_NAMES):
        render = _RENDERERS[name]
        for idx in range(per_class):
            rng = np.random.default_rng([seed, label, idx])
            img, mask = render(rng, size)
            im = LabeledImage(
                pixels=np.clip(img, 0.0, 1.0).astype(np.float32),
                label=label,
                source_id=f"{CLASS_PREFIXES[label]}_{idx:04d}",
                mask=mask.astype(np.uint8),
            )
            (train if idx < cut else test).append(im)
    return DatasetSplit(train=train, test=test)


# --------------------------------------------------------------------------
# PGM I/O and dataset directories
# --------------------------------------------------------------------------

def write_pgm(path, array: np.ndarray):
    """Binary PGM (P5, maxval 255) from a float [0,1] or uint8 array."""
    if array.dtype != np.uint8:
        array = np.clip(np.round(array * 255.0), 0, 255).astype(np.uint8)
    h, w = array.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(array.tobytes())


def read_pgm(path) -> np.ndarray:
    """uint8 array from a binary PGM file."""
    with open(path, "rb") as f:
        data = f.read()
    m = re.match(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise DataError(f"'{path}' is not a binary PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise DataError(f"'{path}': unsupported maxval {maxval}")
    pixels = np.frombuffer(data, np.uint8, count=h * w, offset=m.end())
    return pixels.reshape(h, w).copy()


def write_dataset_dir(split: DatasetSplit, directory):
    """Write images as <Prefix>_<idx>.pgm plus <same>_mask.pgm and a
    manifest.tsv of (file, class, split) rows."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for part, images in (("train", split.train), ("test", split.test)):
        for im in images:
            fname = f"{im.source_id}.pgm"
            write_pgm(root / fname, im.pixels)
            if im.mask is not None:
                write_pgm(root / f"{im.source_id}_mask.pgm", im.mask * 255)
            rows.append((fname, split.class_names[im.label], part))
    rows.sort()
    with open(root / "manifest.tsv", "w", encoding="ascii") as f:
        for fname, cls, part in rows:
            f.write(f"{fname}\t{cls}\t{part}\n")


def load_image(path, size: int | None = None) -> np.ndarray:
    """Single grayscale image as (H, W) float32 in [0, 1]."""
    arr = _decode_image(Path(path))
    if size is not None and arr.shape != (size, size):
        arr = bilinear_resize(arr, size, size)
    return np.clip(arr, 0.0, 1.0)
