"""Image manifests, preprocessing (crop + bilinear resize) and stratified splitting."""

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from .exceptions import DataError, InvalidArgumentError

MANIFEST_HEADER = ("path", "label", "split", "source", "crop_x", "crop_y", "crop_w", "crop_h")
SPLITS = ("train", "val", "test", "unassigned")
MODALITIES = ("xray", "ct")


@dataclass(frozen=True)
class ImageRecord:
    path: str
    label: object
    split: str = "unassigned"
    source: str = ""
    crop: Optional[tuple] = None


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)
    modality: str = "xray"
    target_size: int = 224
    base_dir: str = "."

    def resolve(self, record):
        return os.path.normpath(os.path.join(self.base_dir, record.path))

    def select(self, split):
        return [r for r in self.records if r.split == split]

    def labels(self, split=None):
        records = self.records if split is None else self.select(split)
        return np.array([r.label for r in records], dtype=np.int64)


def read_manifest(path, modality="xray", target_size=224):
    """Read a manifest CSV; relative image paths resolve against its folder.

    Labels that are not integers are kept verbatim so :func:`validate_manifest`
    can report them.
    """
    records = []
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != MANIFEST_HEADER:
                raise DataError(f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}")
            for lineno, row in enumerate(reader, start=2):
                crop_fields = [row[k] for k in MANIFEST_HEADER[4:]]
                crop = None
                if any(v.strip() for v in crop_fields):
                    try:
                        crop = tuple(int(v) for v in crop_fields)
                    except ValueError:
                        raise DataError(f"{path}:{lineno}: crop fields must be integers or all empty") from None
                label = row["label"].strip()
                try:
                    label = int(label)
                except ValueError:
                    pass
                records.append(
                    ImageRecord(row["path"], label, row["split"].strip() or "unassigned", row["source"], crop)
                )
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    base = os.path.dirname(os.path.abspath(path))
    return DatasetManifest(records, modality, target_size, base)


def write_manifest(manifest, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            crop = list(r.crop) if r.crop else ["", "", "", ""]
            writer.writerow([r.path, r.label, r.split, r.source, *crop])


class Violation(NamedTuple):
    kind: str
    index: int
    path: str
    message: str


def _image_size(path):
    with Image.open(path) as img:
        return img.size


def validate_manifest(manifest):
    """Collect every problem in ``manifest``; an empty list means it is clean."""
    problems = []
    seen = {}
    for i, r in enumerate(manifest.records):
        if not r.path:
            problems.append(Violation("empty_path", i, r.path, "record has an empty path"))
            continue
        full = manifest.resolve(r)
        if full in seen:
            problems.append(Violation("duplicate_path", i, r.path, f"duplicates record {seen[full]}"))
        else:
            seen[full] = i
        if r.label not in (0, 1) or isinstance(r.label, bool):
            problems.append(Violation("bad_label", i, r.path, f"label {r.label!r} is not 0 or 1"))
        if r.split not in SPLITS:
            problems.append(Violation("bad_split", i, r.path, f"split {r.split!r} not in {SPLITS}"))
        if not os.path.isfile(full):
            problems.append(Violation("missing_file", i, r.path, f"no such file: {full}"))
            continue
        try:
            width, height = _image_size(full)
        except (OSError, UnidentifiedImageError) as exc:
            problems.append(Violation("unreadable", i, r.path, f"cannot decode image: {exc}"))
            continue
        if r.crop is not None:
            x, y, w, h = r.crop
            if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > width or y + h > height:
                problems.append(
                    Violation("crop_out_of_bounds", i, r.path, f"crop {r.crop} outside image {width}x{height}")
                )
    return problems


def _resize_axis(size_in, size_out):
    # half-pixel centres (align_corners=False), edges clamped
    dst = np.arange(size_out, dtype=np.float64)
    src = (dst + 0.5) * (size_in / size_out) - 0.5
    src = np.clip(src, 0.0, size_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, size_in - 1)
    return lo, hi, src - lo


def bilinear_resize(image, height, width):
    """Bilinear resize of an ``H x W x C`` array, computed in float64."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] < 1 or image.shape[1] < 1:
        raise InvalidArgumentError(f"image must be a non-empty H x W x C array, got {image.shape}")
    if height < 1 or width < 1:
        raise InvalidArgumentError(f"target size must be positive, got {height}x{width}")
    y0, y1, fy = _resize_axis(image.shape[0], height)
    x0, x1, fx = _resize_axis(image.shape[1], width)
    fy = fy[:, None, None]
    rows = image[y0] * (1 - fy) + image[y1] * fy
    fx = fx[None, :, None]
    return rows[:, x0] * (1 - fx) + rows[:, x1] * fx


def _target_hw(target):
    if isinstance(target, (tuple, list)):
        return int(target[0]), int(target[1])
    return int(target), int(target)


def decode_image(path):
    """Decode to an ``H x W x 3`` uint8 array; grayscale is replicated to RGB."""
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(img, dtype=np.float64)
                peak = arr.max() or 1.0
                arr = np.round(arr / peak * 255).astype(np.uint8)
                arr = np.repeat(arr[..., None], 3, axis=2)
            else:
                arr = np.asarray(img.convert("RGB"))
    except FileNotFoundError:
        raise DataError(f"image not found: {path}") from None
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from None
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise DataError(f"image {path} has a zero dimension")
    return arr


def preprocess_array(pixels, target, crop=None, channel_mean=None):
    """Crop, resize and scale an 8-bit ``H x W x 3`` array to float32 in [0, 1]."""
    pixels = np.asarray(pixels)
    if crop is not None:
        x, y, w, h = crop
        height, width = pixels.shape[:2]
        if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > width or y + h > height:
            raise DataError(f"crop {tuple(crop)} outside image {width}x{height}")
        pixels = pixels[y : y + h, x : x + w]
    th, tw = _target_hw(target)
    if pixels.shape[:2] == (th, tw):
        scaled = pixels.astype(np.float64) / 255.0
    else:
        scaled = np.clip(bilinear_resize(pixels, th, tw) / 255.0, 0.0, 1.0)
    if channel_mean is not None:
        scaled = scaled - np.asarray(channel_mean, dtype=np.float64)
    return scaled.astype(np.float32)


def load_and_preprocess(record, target, base_dir=".", channel_mean=None):
    path = os.path.join(base_dir, record.path)
    return preprocess_array(decode_image(path), target, record.crop, channel_mean)


def stratified_split(manifest, train_fraction, rng):
    """Assign ``train``/``val`` per class; ``test`` records are left alone.

    Each class contributes ``round(train_fraction * class_size)`` images to
    training (half rounds up, clamped so both sides are non-empty).
    """
    if not 0 < train_fraction < 1:
        raise InvalidArgumentError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    by_class = {}
    for i, r in enumerate(manifest.records):
        if r.split == "test":
            continue
        if r.label not in (0, 1):
            raise DataError(f"record {i} ({r.path}) has invalid label {r.label!r}")
        by_class.setdefault(r.label, []).append(i)
    records = list(manifest.records)
    for label in sorted(by_class):
        members = by_class[label]
        if len(members) < 2:
            raise DataError(f"class {label} has {len(members)} member(s); at least 2 are needed to split")
        n_train = int(math.floor(train_fraction * len(members) + 0.5))
        n_train = min(max(n_train, 1), len(members) - 1)
        perm = rng.permutation(len(members))
        for rank, j in enumerate(perm):
            idx = members[j]
            records[idx] = replace(records[idx], split="train" if rank < n_train else "val")
    return replace(manifest, records=records)


# -- tensor cache -------------------------------------------------------------

def cache_key(manifest, record, target, channel_mean=None):
    th, tw = _target_hw(target)
    ident = json.dumps(
        [os.path.abspath(manifest.resolve(record)), list(record.crop) if record.crop else None, th, tw,
         None if channel_mean is None else [float(v) for v in channel_mean]]
    )
    return hashlib.sha256(ident.encode("utf-8")).hexdigest()[:20]


def write_cached_tensor(array, stem):
    """Raw little-endian float32 at ``stem.f32`` plus ``stem.json`` with the shape."""
    array = np.ascontiguousarray(array, dtype="<f4")
    with open(stem + ".f32", "wb") as fh:
        fh.write(array.tobytes())
    with open(stem + ".json", "w", encoding="utf-8") as fh:
        json.dump({"dtype": "float32-le", "shape": list(array.shape)}, fh, sort_keys=True)
        fh.write("\n")


def read_cached_tensor(stem):
    with open(stem + ".json", encoding="utf-8") as fh:
        meta = json.load(fh)
    raw = np.fromfile(stem + ".f32", dtype="<f4")
    shape = tuple(meta["shape"])
    if raw.size != int(np.prod(shape)):
        raise DataError(f"cached tensor {stem}.f32 has {raw.size} values, descriptor says {shape}")
    return raw.reshape(shape).astype(np.float32)


def load_images(manifest, records, target, cache_dir=None, channel_mean=None):
    """Stack preprocessed images for ``records``, reading the cache when possible."""
    th, tw = _target_hw(target)
    out = np.empty((len(records), th, tw, 3), np.float32)
    for i, r in enumerate(records):
        arr = None
        if cache_dir is not None:
            stem = os.path.join(cache_dir, cache_key(manifest, r, target, channel_mean))
            if os.path.exists(stem + ".json"):
                arr = read_cached_tensor(stem)
        if arr is None:
            arr = load_and_preprocess(r, (th, tw), manifest.base_dir, channel_mean)
        out[i] = arr
    return out


def load_split(manifest, split, target, cache_dir=None, channel_mean=None):
    records = manifest.select(split)
    images = load_images(manifest, records, target, cache_dir, channel_mean)
    labels = np.array([r.label for r in records], dtype=np.int64)
    return images, labels
