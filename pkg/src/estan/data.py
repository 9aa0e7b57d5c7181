"""Dataset manifests, image/mask loading, k-fold splits and synthetic data."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FormatError, ValidationError
from .tensor import SeededRng

MANIFEST_FIELDS = ("image_id", "image_path", "mask_path", "original_h", "original_w")


@dataclass
class ManifestRecord:
    image_id: str
    image_path: Path
    mask_path: Path
    original_h: int | None = None
    original_w: int | None = None
    tumor_size: float | None = None


def read_manifest(path) -> list[ManifestRecord]:
    """Parse a manifest CSV; relative paths are resolved against its directory."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc.strerror}") from exc
    reader = csv.DictReader(text.splitlines())
    header = set(reader.fieldnames or [])
    rows = list(reader)
    missing = {"image_id", "image_path", "mask_path"} - header
    if missing:
        raise FormatError(f"manifest {path} lacks column(s) {sorted(missing)}", field=sorted(missing)[0])
    records, seen = [], set()
    for row in rows:
        rid = row["image_id"]
        if rid in seen:
            raise FormatError(f"duplicate image_id {rid!r} in {path}", field="image_id")
        seen.add(rid)
        rec = ManifestRecord(rid, path.parent / row["image_path"], path.parent / row["mask_path"])
        if row.get("original_h"):
            rec.original_h, rec.original_w = int(row["original_h"]), int(row["original_w"])
        if row.get("tumor_size"):
            rec.tumor_size = float(row["tumor_size"])
        records.append(rec)
    return records


def write_manifest(records, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in records:
            w.writerow(
                [
                    r.image_id,
                    Path(r.image_path).relative_to(path.parent).as_posix(),
                    Path(r.mask_path).relative_to(path.parent).as_posix(),
                    "" if r.original_h is None else r.original_h,
                    "" if r.original_w is None else r.original_w,
                ]
            )


def read_gray_png(path) -> np.ndarray:
    """8-bit grayscale image as a (h, w) uint8 array."""
    try:
        with Image.open(path) as im:
            if im.mode == "1":
                im = im.convert("L")
            if im.mode != "L":
                raise FormatError(f"{path}: expected 8-bit grayscale, got mode {im.mode}", field="mode")
            return np.array(im, dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


def write_gray_png(arr: np.ndarray, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L").save(path, format="PNG")


def _source_coords(out_n: int, in_n: int) -> np.ndarray:
    # pixel-centre alignment: output centre i maps to input coordinate (i + 0.5) * in/out - 0.5
    return (np.arange(out_n) + 0.5) * (in_n / out_n) - 0.5


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.clip(_source_coords(out_h, h), 0, h - 1)
    xs = np.clip(_source_coords(out_w, w), 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Source index ``floor((i + 0.5) * in / out)`` per axis."""
    mask = np.asarray(mask)
    h, w = mask.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return mask[rows][:, cols]


@dataclass
class Sample:
    image: np.ndarray  # (1, 1, hw, hw) float32 in [0, 1]
    mask: np.ndarray  # (hw, hw) uint8 in {0, 1}
    original_mask: np.ndarray  # (original_h, original_w) uint8 in {0, 1}


def load_sample(record: ManifestRecord, input_hw: int) -> Sample:
    img = read_gray_png(record.image_path)
    raw_mask = read_gray_png(record.mask_path)
    if img.shape != raw_mask.shape:
        raise FormatError(f"{record.image_id}: image {img.shape} and mask {raw_mask.shape} differ", field="dims")
    original = (raw_mask > 0).astype(np.uint8)
    image = resize_bilinear(img.astype(np.float64) / 255.0, input_hw, input_hw)
    mask = resize_nearest(original, input_hw, input_hw)
    return Sample(image[None, None].astype(np.float32), mask, original)


def load_arrays(records, input_hw: int):
    """Stack samples into (N, 1, hw, hw) float32 images and masks."""
    samples = [load_sample(r, input_hw) for r in records]
    images = np.concatenate([s.image for s in samples]) if samples else np.zeros((0, 1, input_hw, input_hw), np.float32)
    masks = np.stack([s.mask[None] for s in samples]).astype(np.float32) if samples else images.copy()
    return images, masks, samples


@dataclass
class FoldSplit:
    folds: list  # k arrays of record indices
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    def test_indices(self, fold: int) -> np.ndarray:
        return self.folds[fold]

    def train_indices(self, fold: int) -> np.ndarray:
        return np.sort(np.concatenate([f for i, f in enumerate(self.folds) if i != fold]))


def kfold_split(n: int, k: int = 5, seed: int = 0) -> FoldSplit:
    """Seeded shuffle, then round-robin: fold i receives shuffled positions i, i+k, ..."""
    if k < 2 or n < k:
        raise ValidationError(f"cannot split {n} records into {k} folds")
    perm = SeededRng(seed).permutation(n)
    return FoldSplit([np.sort(perm[i::k]) for i in range(k)], seed)


def _ellipse_mask(hw: int, cy: float, cx: float, a: float, b: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.uint8)


def synth_pair(hw: int, rng: SeededRng, min_axis: float | None = None, max_axis: float | None = None):
    """One (image uint8, mask uint8) pair: dark speckled ellipse on a brighter layered background.

    ``min_axis``/``max_axis`` bound the full length of the ellipse's major
    axis in pixels.
    """
    min_axis = hw / 5 if min_axis is None else min_axis
    max_axis = hw / 2 if max_axis is None else max_axis
    # semi-axes padded by 1.5 px so pixel-centre diameters stay >= min_axis
    a = rng.uniform(1)[0] * (max_axis - min_axis) / 2 + min_axis / 2 + 1.5
    b = a * (0.5 + 0.5 * rng.uniform(1)[0])
    theta = rng.uniform(1)[0] * math.pi
    margin = a + 1
    cy, cx = margin + rng.uniform(2) * max(hw - 2 * margin, 0)
    mask = _ellipse_mask(hw, cy, cx, a, b, theta)

    background = 0.55 + 0.2 * rng.uniform(1)[0]
    # horizontal tissue layering
    layers = 0.08 * np.sin(np.arange(hw) * (2 * math.pi / hw) * (2 + 3 * rng.uniform(1)[0]))[:, None]
    tumor = 0.12 + 0.1 * rng.uniform(1)[0]
    clean = np.where(mask > 0, tumor, background + layers)
    speckle = np.clip(1.0 + 0.25 * rng.normal((hw, hw)), 0.3, 1.7)
    image = np.clip(clean * speckle, 0.0, 1.0)
    return np.round(image * 255).astype(np.uint8), mask


def synth_generate(count: int, hw: int, rng: SeededRng | int, out_dir, min_axis: float | None = None) -> list:
    """Write ``count`` synthetic pairs plus ``manifest.csv`` under ``out_dir``."""
    if hw < 16 or hw % 16:
        raise ValidationError(f"synthetic image size {hw} is not a multiple of 16")
    if isinstance(rng, int):
        rng = SeededRng(rng)
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc.strerror}") from exc
    records = []
    for i in range(count):
        image, mask = synth_pair(hw, rng, min_axis=min_axis)
        rid = f"synth_{i:04d}"
        rec = ManifestRecord(rid, out_dir / "images" / f"{rid}.png", out_dir / "masks" / f"{rid}.png", hw, hw)
        write_gray_png(image, rec.image_path)
        write_gray_png(mask * 255, rec.mask_path)
        records.append(rec)
    write_manifest(records, out_dir / "manifest.csv")
    return records
