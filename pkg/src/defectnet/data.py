"""Dataset ingestion, annotation rasterization and a synthetic defect generator."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import DataError, ShapeError

Layout = Literal["mask_folders", "rotated_box_index"]
DefectKind = Literal["blob", "scratch"]


@dataclass
class ImageSample:
    """One image with its pixel mask and image-level label.

    ``image`` is H x W x C float32 in [0, 1]; ``mask`` is H x W uint8 (1 = defect).
    """

    id: str
    image: np.ndarray
    mask: np.ndarray
    label: int

    def __post_init__(self) -> None:
        if self.image.ndim != 3:
            raise ShapeError(f"{self.id}: image must be H x W x C, got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise ShapeError(
                f"{self.id}: mask shape {self.mask.shape} != image shape {self.image.shape[:2]}"
            )
        if self.mask.any() and self.label != 1:
            raise DataError(f"{self.id}: mask has defect pixels but label is {self.label}")


@dataclass
class DatasetSplit:
    positives: list[ImageSample] = field(default_factory=list)
    negatives: list[ImageSample] = field(default_factory=list)
    name: str = ""

    def __post_init__(self) -> None:
        ids = [s.id for s in self.positives] + [s.id for s in self.negatives]
        if len(ids) != len(set(ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"split {self.name!r}: duplicate ids {dupes[:5]}")

    @property
    def samples(self) -> list[ImageSample]:
        return self.positives + self.negatives

    def ids(self) -> set[str]:
        return {s.id for s in self.samples}


@dataclass(frozen=True)
class RotatedBox:
    """Rectangle centred at (cx, cy) whose width axis is turned ``angle`` degrees
    from the +x image axis towards +y."""

    cx: float
    cy: float
    w: float
    h: float
    angle: float = 0.0

    def __post_init__(self) -> None:
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box size must be positive, got {self.w} x {self.h}")


# Pixel (row i, col j) covers [j, j+1) x [i, i+1); its centre is (j+0.5, i+0.5).
_EDGE_EPS = 1e-9


def rasterize_rotated_box(box: RotatedBox, height: int, width: int) -> np.ndarray:
    """Binary mask of pixels whose centres fall inside ``box`` (edges inclusive)."""
    ys = np.arange(height, dtype=np.float64)[:, None] + 0.5 - box.cy
    xs = np.arange(width, dtype=np.float64)[None, :] + 0.5 - box.cx
    theta = math.radians(box.angle)
    c, s = math.cos(theta), math.sin(theta)
    u = xs * c + ys * s
    v = -xs * s + ys * c
    inside = (np.abs(u) <= box.w / 2 + _EDGE_EPS) & (np.abs(v) <= box.h / 2 + _EDGE_EPS)
    return inside.astype(np.uint8)


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Block-max pooling: an output pixel is positive iff its block has a positive."""
    mask = np.asarray(mask)
    h, w = mask.shape
    if h % factor or w % factor:
        raise ShapeError(f"mask {h}x{w} not divisible by {factor}")
    blocks = (mask > 0).reshape(h // factor, factor, w // factor, factor)
    return blocks.any(axis=(1, 3)).astype(np.uint8)


def pad_to_multiple(sample: ImageSample, factor: int) -> ImageSample:
    """Zero-pad image and mask at the bottom/right so both dims divide ``factor``."""
    h, w = sample.mask.shape
    ph, pw = (-h) % factor, (-w) % factor
    if ph == 0 and pw == 0:
        return sample
    image = np.pad(sample.image, ((0, ph), (0, pw), (0, 0)))
    mask = np.pad(sample.mask, ((0, ph), (0, pw)))
    return ImageSample(sample.id, image, mask, sample.label)


def _read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode in ("L", "P", "1"):
                arr = np.asarray(img.convert("L"), dtype=np.float32) / 255.0
            elif img.mode.startswith("I"):
                raw = np.asarray(img, dtype=np.float64)
                arr = (raw / (65535.0 if raw.max() > 255 else 255.0)).astype(np.float32)
            else:
                arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def _read_mask(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"))
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc
    return (arr > 0).astype(np.uint8)


def _pngs(folder: Path) -> list[Path]:
    return sorted(p for p in folder.glob("*.png") if p.is_file())


def _load_mask_folders(root: Path) -> DatasetSplit:
    pos_dir, mask_dir, neg_dir = root / "pos", root / "pos_masks", root / "neg"
    positives, negatives = [], []
    for path in _pngs(pos_dir) if pos_dir.is_dir() else []:
        mask_path = mask_dir / path.name
        if not mask_path.is_file():
            raise DataError(f"missing mask {mask_path} for positive image {path}")
        image, mask = _read_image(path), _read_mask(mask_path)
        if mask.shape != image.shape[:2]:
            raise DataError(f"mask {mask_path} shape {mask.shape} != image {image.shape[:2]}")
        if not mask.any():
            raise DataError(f"positive image {path} has an all-zero mask")
        positives.append(ImageSample(f"pos/{path.stem}", image, mask, 1))
    for path in _pngs(neg_dir) if neg_dir.is_dir() else []:
        image = _read_image(path)
        negatives.append(ImageSample(f"neg/{path.stem}", image, np.zeros(image.shape[:2], np.uint8), 0))
    return DatasetSplit(positives, negatives, name=root.name)


def read_box_index(path: Path) -> dict[str, list[RotatedBox]]:
    """Parse ``id cx cy w h angle_deg`` rows (tab or whitespace separated)."""
    boxes: dict[str, list[RotatedBox]] = defaultdict(list)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            fields = line.split()
            if not fields or fields[0].startswith("#"):
                continue
            if lineno == 1 and fields[0] == "id":
                continue
            if len(fields) != 6:
                raise DataError(f"{path}:{lineno}: expected 6 columns, got {len(fields)}")
            try:
                cx, cy, w, h, angle = map(float, fields[1:])
                boxes[fields[0]].append(RotatedBox(cx, cy, w, h, angle))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return dict(boxes)


def _load_rotated_box_index(root: Path) -> DatasetSplit:
    index_path = root / "annotations.tsv"
    boxes = read_box_index(index_path) if index_path.is_file() else {}
    images = {p.stem: p for p in _pngs(root / "images")}
    unknown = sorted(set(boxes) - set(images))
    if unknown:
        raise DataError(f"{index_path} references missing images: {unknown[:5]}")
    positives, negatives = [], []
    for stem in sorted(images):
        image = _read_image(images[stem])
        h, w = image.shape[:2]
        if stem in boxes:
            mask = np.zeros((h, w), np.uint8)
            for box in boxes[stem]:
                mask |= rasterize_rotated_box(box, h, w)
            if not mask.any():
                raise DataError(f"annotated image {images[stem]} has no box pixel inside the image")
            positives.append(ImageSample(stem, image, mask, 1))
        else:
            negatives.append(ImageSample(stem, image, np.zeros((h, w), np.uint8), 0))
    return DatasetSplit(positives, negatives, name=root.name)


def load_dataset(root: str | Path, layout: Layout = "mask_folders", pad_to: int | None = None) -> DatasetSplit:
    """Load a dataset directory without resizing or augmentation.

    Layouts:
        ``mask_folders``: ``pos/*.png``, ``pos_masks/<same name>.png``, ``neg/*.png``.
        ``rotated_box_index``: ``images/*.png`` and ``annotations.tsv`` with
        ``id cx cy w h angle_deg`` rows; several rows per id are unioned and ids
        without rows are negatives.

    Args:
        pad_to: if given, zero-pad every sample so its dims divide this factor.

    Raises:
        DataError: missing directory, missing/empty mask, unreadable file, or no
            positive samples.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    if layout == "mask_folders":
        split = _load_mask_folders(root)
    elif layout == "rotated_box_index":
        split = _load_rotated_box_index(root)
    else:
        raise ValueError(f"unknown layout {layout!r}")
    if not split.positives:
        raise DataError(f"dataset {root} has no positive samples")
    if pad_to:
        split = DatasetSplit(
            [pad_to_multiple(s, pad_to) for s in split.positives],
            [pad_to_multiple(s, pad_to) for s in split.negatives],
            split.name,
        )
    return split


@dataclass(frozen=True)
class SynthSpec:
    n_pos: int = 60
    n_neg: int = 60
    size: int = 128
    defect: DefectKind = "blob"
    noise_level: float = 0.05
    channels: int = 1


def _texture(rng: np.random.Generator, size: int, noise_level: float) -> np.ndarray:
    # band-limited noise: blurred white noise at two scales
    coarse = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 16)
    fine = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=1.5)
    coarse /= coarse.std() + 1e-12
    fine /= fine.std() + 1e-12
    tex = 0.5 + 0.06 * coarse + 0.05 * fine + noise_level * rng.standard_normal((size, size))
    return tex


def _defect_mask(rng: np.random.Generator, size: int, kind: DefectKind) -> np.ndarray:
    margin = size // 8
    # centre on a pixel centre so the centre pixel is always inside the defect
    cx = rng.integers(margin, size - margin) + 0.5
    cy = rng.integers(margin, size - margin) + 0.5
    angle = float(rng.uniform(0.0, 180.0))
    if kind == "blob":
        a = rng.uniform(size / 32, size / 10)
        b = rng.uniform(size / 32, size / 10)
        ys = np.arange(size)[:, None] + 0.5 - cy
        xs = np.arange(size)[None, :] + 0.5 - cx
        t = math.radians(angle)
        u = xs * math.cos(t) + ys * math.sin(t)
        v = -xs * math.sin(t) + ys * math.cos(t)
        return ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.uint8)
    if kind == "scratch":
        length = rng.uniform(size / 5, size / 2.5)
        width = rng.uniform(1.0, 3.0)
        return rasterize_rotated_box(RotatedBox(cx, cy, length, width, angle), size, size)
    raise ValueError(f"unknown defect kind {kind!r}")


def _synth_sample(seq: np.random.SeedSequence, spec: SynthSpec, sample_id: str, positive: bool) -> ImageSample:
    rng = np.random.default_rng(seq)
    image = _texture(rng, spec.size, spec.noise_level)
    mask = np.zeros((spec.size, spec.size), np.uint8)
    if positive:
        mask = _defect_mask(rng, spec.size, spec.defect)
        shift = rng.uniform(0.25, 0.4) * rng.choice([-1.0, 1.0])
        image = image + shift * mask
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    image = np.repeat(image[:, :, None], spec.channels, axis=2)
    return ImageSample(sample_id, image, mask, int(positive))


def synth_generate(spec: SynthSpec, seed: int, downsample_factor: int = 8) -> DatasetSplit:
    """Textured surfaces, one intensity-shifted blob or thin scratch per positive.

    The returned masks are the exact generation masks. Output is a pure function
    of ``(spec, seed)``.
    """
    if spec.size % downsample_factor:
        raise ShapeError(
            f"size {spec.size} is not divisible by downsample factor {downsample_factor}"
        )
    root = np.random.SeedSequence(seed)
    pos_seqs, neg_seqs = root.spawn(2)
    positives = [
        _synth_sample(s, spec, f"synth_pos_{i:04d}", True)
        for i, s in enumerate(pos_seqs.spawn(spec.n_pos))
    ]
    negatives = [
        _synth_sample(s, spec, f"synth_neg_{i:04d}", False)
        for i, s in enumerate(neg_seqs.spawn(spec.n_neg))
    ]
    return DatasetSplit(positives, negatives, name=f"synth-{seed}")


def save_mask_folders(split: DatasetSplit, out_dir: str | Path) -> None:
    """Write ``split`` in the ``mask_folders`` layout as 8-bit PNGs."""
    out = Path(out_dir)
    for sub in ("pos", "pos_masks", "neg"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    def to_png(arr: np.ndarray, path: Path) -> None:
        data = np.round(np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8)
        if data.ndim == 3 and data.shape[2] == 1:
            data = data[:, :, 0]
        Image.fromarray(data).save(path)

    for s in split.positives:
        name = s.id.split("/")[-1] + ".png"
        to_png(s.image, out / "pos" / name)
        Image.fromarray(s.mask.astype(np.uint8) * 255).save(out / "pos_masks" / name)
    for s in split.negatives:
        to_png(s.image, out / "neg" / (s.id.split("/")[-1] + ".png"))
