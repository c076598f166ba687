"""Dataset ingestion, preprocessing, augmentation and test-time transform families."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .core import CLASS_LABELS, BinaryMask, Image, ValidationError

INPUT_SIZE = 224
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class IngestionError(ValidationError):
    pass


class DecodeError(ValidationError):
    pass


# --------------------------------------------------------------------------- preprocessing


def decode_image(path) -> np.ndarray:
    """Read an image file into an H×W×C uint8 array (C = 1 or 3)."""
    try:
        with PILImage.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def _to_unit_range(raw: np.ndarray) -> np.ndarray:
    if np.issubdtype(raw.dtype, np.integer) or raw.dtype == bool:
        return raw.astype(np.float32) / 255.0
    arr = raw.astype(np.float32)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValidationError("floating-point rasters must already be in [0, 1]")
    return arr


def resize_bicubic(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bicubic resample of an H×W×C float array to (rows, cols).

    Uses Pillow's float mode, which antialiases on downscaling.
    """
    rows, cols = size
    if arr.shape[:2] == (rows, cols):
        return arr.astype(np.float32, copy=True)
    out = np.empty((rows, cols, arr.shape[2]), dtype=np.float32)
    for c in range(arr.shape[2]):
        band = PILImage.fromarray(np.ascontiguousarray(arr[:, :, c], dtype=np.float32), mode="F")
        out[:, :, c] = np.asarray(band.resize((cols, rows), PILImage.BICUBIC))
    return out


def preprocess(raw, size: int = INPUT_SIZE) -> Image:
    """Resize to size×size with bicubic interpolation and scale to [0, 1].

    Integer rasters are divided by 255; float rasters are assumed to already be
    in [0, 1].
    """
    if isinstance(raw, Image):
        raw = raw.pixels
    raw = np.asarray(raw)
    if raw.ndim == 2:
        raw = raw[:, :, None]
    if raw.ndim != 3 or raw.shape[2] not in (1, 3) or raw.shape[0] < 1 or raw.shape[1] < 1:
        raise ValidationError(f"raster must be H×W×{{1,3}} with at least one pixel, got {raw.shape}")
    arr = resize_bicubic(_to_unit_range(raw), (size, size))
    return Image(np.clip(arr, 0.0, 1.0))


def resize_mask(mask: np.ndarray, size: int) -> BinaryMask:
    m = np.asarray(mask, dtype=bool)
    if m.shape == (size, size):
        return BinaryMask(m.copy())
    im = PILImage.fromarray(m.astype(np.uint8) * 255, mode="L").resize((size, size), PILImage.NEAREST)
    return BinaryMask(np.asarray(im) > 127)


# --------------------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentationSpec:
    allow_hflip: bool = True
    allow_vflip: bool = True
    rotation_range: tuple[float, float] = (-65.0, 65.0)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.rotation_range
        if not -180.0 <= lo <= hi <= 180.0:
            raise ValidationError(f"rotation_range must lie within [-180, 180], got {self.rotation_range}")

    @classmethod
    def disabled(cls) -> "AugmentationSpec":
        return cls(allow_hflip=False, allow_vflip=False, rotation_range=(0.0, 0.0))

    @property
    def is_identity(self) -> bool:
        return not self.allow_hflip and not self.allow_vflip and self.rotation_range == (0.0, 0.0)


@dataclass(frozen=True)
class Transform:
    """One sampled composition: optional flips followed by a rotation (degrees)."""

    hflip: bool = False
    vflip: bool = False
    angle: float = 0.0

    @property
    def is_identity(self) -> bool:
        return not self.hflip and not self.vflip and self.angle == 0.0

    def apply(self, pixels: np.ndarray) -> np.ndarray:
        out = pixels
        if self.hflip:
            out = out[:, ::-1]
        if self.vflip:
            out = out[::-1]
        if self.angle != 0.0:
            out = _rotate(out, self.angle)
        return np.ascontiguousarray(out)

    def invert_map(self, prob_map: np.ndarray) -> np.ndarray:
        """Map a 2-D prediction on the transformed image back onto the original frame."""
        out = prob_map
        if self.angle != 0.0:
            out = ndimage.rotate(out, -self.angle, reshape=False, order=1, mode="nearest")
        if self.vflip:
            out = out[::-1]
        if self.hflip:
            out = out[:, ::-1]
        return np.clip(np.ascontiguousarray(out), 0.0, 1.0)


def _rotate(pixels: np.ndarray, angle: float) -> np.ndarray:
    # out-of-frame corners take the per-channel mean
    out = np.empty_like(pixels)
    for c in range(pixels.shape[2]):
        band = pixels[:, :, c]
        out[:, :, c] = ndimage.rotate(
            band, angle, reshape=False, order=1, mode="constant", cval=float(band.mean())
        )
    return np.clip(out, 0.0, 1.0)


def sample_transform(spec: AugmentationSpec, rng: np.random.Generator) -> Transform:
    # every draw is consumed regardless of which transforms are enabled, so a
    # given RNG state always advances by the same amount
    u_h, u_v, u_rot = rng.random(3)
    lo, hi = spec.rotation_range
    return Transform(
        hflip=spec.allow_hflip and u_h < 0.5,
        vflip=spec.allow_vflip and u_v < 0.5,
        angle=float(lo + (hi - lo) * u_rot) if hi > lo else float(lo),
    )


def augment(img: Image, spec: AugmentationSpec, rng: np.random.Generator) -> Image:
    return Image(sample_transform(spec, rng).apply(img.pixels))


def tta_transforms(V: int, seed: int, spec: AugmentationSpec | None = None) -> list[Transform]:
    """V transforms: the identity followed by V-1 draws from independent sub-seeds."""
    if V < 1:
        raise ValidationError(f"V must be at least 1, got {V}")
    spec = spec or AugmentationSpec()
    children = np.random.SeedSequence(seed).spawn(V - 1)
    return [Transform()] + [sample_transform(spec, np.random.default_rng(c)) for c in children]


def tta_family(img: Image, V: int, seed: int, spec: AugmentationSpec | None = None) -> list[Image]:
    return [img if t.is_identity else Image(t.apply(img.pixels)) for t in tta_transforms(V, seed, spec)]


# --------------------------------------------------------------------------- masks


def bbox_to_mask(box: tuple[int, int, int, int], shape: tuple[int, int]) -> BinaryMask:
    r0, c0, r1, c1 = (int(v) for v in box)
    H, W = shape
    if not (0 <= r0 < r1 <= H and 0 <= c0 < c1 <= W):
        raise ValidationError(f"box {box} is degenerate or outside a {H}×{W} frame")
    m = np.zeros((H, W), dtype=bool)
    m[r0:r1, c0:c1] = True
    return BinaryMask(m)


def read_mask(path) -> np.ndarray:
    arr = decode_image(path)
    if arr.shape[2] == 3:
        arr = arr.mean(axis=2, keepdims=True)
    return arr[:, :, 0] > 127


# --------------------------------------------------------------------------- manifests


@dataclass(frozen=True)
class Entry:
    image: Path
    target: object  # class label str, mask Path, or (row0, col0, row1, col1) box


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    kind: str
    entries: tuple[Entry, ...]
    class_labels: tuple[str, ...] = CLASS_LABELS
    class_counts: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def labels(self) -> list[str]:
        if self.kind != "classification":
            raise ValidationError("only classification manifests carry labels")
        return [e.target for e in self.entries]

    def subset(self, indices) -> "DatasetManifest":
        entries = tuple(self.entries[i] for i in indices)
        return DatasetManifest(self.root, self.kind, entries, self.class_labels, _count(entries, self.kind))


def _count(entries, kind) -> dict:
    if kind != "classification":
        return {}
    counts: dict[str, int] = {}
    for e in entries:
        counts[e.target] = counts.get(e.target, 0) + 1
    return counts


def _list_images(folder: Path) -> list[Path]:
    if not folder.is_dir():
        raise IngestionError(f"missing directory: {folder}")
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_dataset(root, kind: str, class_labels: tuple[str, ...] = CLASS_LABELS) -> DatasetManifest:
    root = Path(root)
    if kind not in ("segmentation", "classification"):
        raise ValidationError(f"kind must be 'segmentation' or 'classification', got {kind!r}")
    if not root.is_dir():
        raise IngestionError(f"missing directory: {root}")
    images = _list_images(root / "images")

    if kind == "classification":
        label_file = root / "labels.csv"
        if not label_file.is_file():
            raise IngestionError(f"missing label file: {label_file}")
        by_name = {p.name: p for p in images}
        entries = []
        with open(label_file, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"image", "label"} <= set(reader.fieldnames):
                raise IngestionError(f"{label_file} must have header 'image,label'")
            for row in reader:
                name, label = row["image"].strip(), row["label"].strip()
                if label not in class_labels:
                    raise IngestionError(f"{label_file}: unknown label {label!r} for image {name}")
                path = by_name.get(name) or _match_stem(by_name, name)
                if path is None:
                    raise IngestionError(f"{label_file}: image {root / 'images' / name} does not exist")
                entries.append(Entry(path, label))
        entries.sort(key=lambda e: e.image.name)
        return DatasetManifest(root, kind, tuple(entries), tuple(class_labels), _count(entries, kind))

    masks = {p.stem: p for p in _list_images(root / "masks")} if (root / "masks").is_dir() else {}
    boxes = _read_boxes(root / "boxes.csv")
    entries = []
    for img in images:
        if img.stem in masks:
            entries.append(Entry(img, masks[img.stem]))
        elif img.name in boxes or img.stem in boxes:
            entries.append(Entry(img, boxes.get(img.name) or boxes[img.stem]))
        else:
            raise IngestionError(f"image {img} has no paired mask or bounding box")
    stems = {img.stem for img in images}
    for stem, path in masks.items():
        if stem not in stems:
            raise IngestionError(f"mask {path} has no paired image")
    return DatasetManifest(root, kind, tuple(entries), tuple(class_labels), {})


def _match_stem(by_name: dict, name: str):
    for fname, path in by_name.items():
        if Path(fname).stem == name:
            return path
    return None


def _read_boxes(path: Path) -> dict:
    if not path.is_file():
        return {}
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                out[row["image"].strip()] = tuple(int(row[k]) for k in ("row0", "col0", "row1", "col1"))
            except (KeyError, ValueError) as exc:
                raise IngestionError(f"{path}: malformed row {row}") from exc
    return out


def load_sample(manifest: DatasetManifest, index: int, size: int = INPUT_SIZE):
    """Return (Image, target) where target is a BinaryMask or a class index."""
    entry = manifest.entries[index]
    raw = decode_image(entry.image)
    img = preprocess(raw, size)
    if manifest.kind == "classification":
        return img, manifest.class_labels.index(entry.target)
    if isinstance(entry.target, tuple):
        mask = bbox_to_mask(entry.target, raw.shape[:2]).pixels
    else:
        mask = read_mask(entry.target)
        if mask.shape != raw.shape[:2]:
            raise IngestionError(f"mask {entry.target} does not match image {entry.image} resolution")
    return img, resize_mask(mask, size)


def load_arrays(manifest: DatasetManifest, size: int = INPUT_SIZE):
    """Materialize a manifest as (N×H×W×C float32 images, targets)."""
    imgs, targets = [], []
    for i in range(len(manifest)):
        img, target = load_sample(manifest, i, size)
        imgs.append(img.pixels)
        targets.append(target.pixels if isinstance(target, BinaryMask) else target)
    return np.stack(imgs).astype(np.float32), np.stack(targets) if targets else np.empty(0)


def balance_by_augmentation(images: np.ndarray, labels: np.ndarray, spec: AugmentationSpec, seed: int):
    """Oversample minority classes with augmented copies up to the majority count."""
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    target = counts.max()
    extra_imgs, extra_labels = [], []
    for cls, n in zip(classes, counts):
        idx = np.flatnonzero(labels == cls)
        rng = np.random.default_rng([seed, int(cls)])
        for k in range(target - n):
            src = images[idx[k % n]]
            extra_imgs.append(sample_transform(spec, rng).apply(src))
            extra_labels.append(cls)
    if not extra_imgs:
        return images, labels
    return np.concatenate([images, np.stack(extra_imgs)]), np.concatenate([labels, extra_labels])


def split(manifest: DatasetManifest, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Disjoint train/val/test partition, stratified per class for classification.

    Within each stratum of n entries: train = ⌊n·f_train + ½⌋, val = ⌊n·f_val + ½⌋
    (capped at what remains), test gets the rest.
    """
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ValidationError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    if manifest.kind == "classification":
        strata: dict = {}
        for i, e in enumerate(manifest.entries):
            strata.setdefault(e.target, []).append(i)
    else:
        strata = {None: list(range(len(manifest)))}
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[], [], []]
    for key in sorted(strata, key=str):
        idx = np.array(strata[key])
        rng.shuffle(idx)
        n = len(idx)
        n_train = min(n, math.floor(n * fr[0] + 0.5))
        n_val = min(n - n_train, math.floor(n * fr[1] + 0.5))
        parts[0] += idx[:n_train].tolist()
        parts[1] += idx[n_train : n_train + n_val].tolist()
        parts[2] += idx[n_train + n_val :].tolist()
    return tuple(manifest.subset(sorted(p)) for p in parts)
