"""Datasets: normal-only training sets, labelled test sets, folder loading, synthetic generation."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .config import SyntheticSpec

NORMAL, ANOMALOUS = "normal", "anomalous"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


class DatasetError(ValueError):
    pass


@dataclass
class NormalImageSet:
    images: np.ndarray  # (N, H, W, R) float32 in [0, 1]
    ids: list[str]

    def __post_init__(self):
        if len(self.images) != len(self.ids):
            raise DatasetError("image and id counts differ")

    @property
    def labels(self) -> list[str]:
        return [NORMAL] * len(self.ids)

    def __len__(self):
        return len(self.ids)


@dataclass
class LabeledTestSet:
    images: np.ndarray  # (N, H, W, R)
    labels: list[str]
    masks: list[np.ndarray | None]
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.ids:
            self.ids = [f"test_{i:05d}" for i in range(len(self.labels))]
        if not len(self.images) == len(self.labels) == len(self.masks) == len(self.ids):
            raise DatasetError("test set fields have different lengths")
        for i, (label, mask) in enumerate(zip(self.labels, self.masks)):
            if label not in (NORMAL, ANOMALOUS):
                raise DatasetError(f"entry {self.ids[i]}: unknown label {label!r}")
            if mask is None:
                continue
            if label != ANOMALOUS:
                raise DatasetError(f"entry {self.ids[i]}: a normal image cannot carry a mask")
            if mask.shape != self.images[i].shape[:2]:
                raise DatasetError(f"entry {self.ids[i]}: mask/image size mismatch")
            if not np.isin(mask, (0, 1)).all():
                raise DatasetError(f"entry {self.ids[i]}: mask is not binary")

    def __len__(self):
        return len(self.labels)

    @property
    def binary_labels(self) -> np.ndarray:
        return np.array([label == ANOMALOUS for label in self.labels], dtype=int)

    def anomalous_with_masks(self) -> list[int]:
        return [i for i, (l, m) in enumerate(zip(self.labels, self.masks)) if l == ANOMALOUS and m is not None]


# -- folder datasets -----------------------------------------------------------


def read_image(path: Path, size: int, channels: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("L" if channels == 1 else "RGB")
            if im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise DatasetError(f"missing image file: {path}") from None
    except OSError as exc:
        raise DatasetError(f"unreadable image {path}: {exc}") from exc
    return arr.reshape(size, size, channels)


def read_mask(path: Path, image_path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            mask_size = im.size
            arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise DatasetError(f"missing mask file: {path}") from None
    except OSError as exc:
        raise DatasetError(f"unreadable mask {path}: {exc}") from exc
    with Image.open(image_path) as im:
        if im.size != mask_size:
            raise DatasetError(f"mask {path} is {mask_size}, image {image_path} is {im.size}")
    return arr


def _resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    if mask.shape != (size, size):
        im = Image.fromarray((mask * 255).astype(np.uint8)).resize((size, size), Image.BILINEAR)
        mask = np.asarray(im, dtype=np.float32) / 255.0
    return (mask >= 0.5).astype(np.uint8)


def _manifest_rows(root: Path, manifest: str | Path | None):
    """Yield (split, relative path, label, mask path or None)."""
    if manifest is not None:
        with open(root / manifest if not Path(manifest).is_absolute() else manifest, newline="") as fh:
            for row in csv.DictReader(fh):
                split = (row.get("split") or "").strip() or None
                mask = (row.get("mask_path") or "").strip() or None
                yield split, row["path"].strip(), row["label"].strip(), mask
        return
    # directories as labels: train/normal, test/normal, test/anomalous, optional test/masks/<stem>.png
    for split in ("train", "test"):
        for label in (NORMAL, ANOMALOUS):
            folder = root / split / label
            if not folder.is_dir():
                continue
            for path in sorted(folder.iterdir()):
                if path.suffix.lower() not in IMAGE_SUFFIXES:
                    continue
                mask = None
                if label == ANOMALOUS:
                    cand = root / split / "masks" / (path.stem + ".png")
                    mask = str(cand.relative_to(root)) if cand.exists() else None
                yield split, str(path.relative_to(root)), label, mask


def load_folder_dataset(
    root: str | Path,
    split_manifest: str | Path | None = None,
    image_size: int = 224,
    channels: int = 3,
) -> tuple[NormalImageSet, LabeledTestSet]:
    """Load a folder dataset.

    The manifest is a CSV with columns ``path,label,mask_path`` and an optional
    ``split`` column (``train``/``test``). Without a split column, normal images
    with no split go to training only when the label column says ``normal`` and
    the path starts with ``train/``; everything else is test data. With no
    manifest, the layout ``{train,test}/{normal,anomalous}/`` is used.
    """
    root = Path(root)
    train_imgs, train_ids = [], []
    test_imgs, test_labels, test_masks, test_ids = [], [], [], []
    for split, rel, label, mask_rel in _manifest_rows(root, split_manifest):
        if label not in (NORMAL, ANOMALOUS):
            raise DatasetError(f"{rel}: unknown label {label!r}")
        if mask_rel and label != ANOMALOUS:
            raise DatasetError(f"{rel}: mask given for a {label} image")
        if split is None:
            split = "train" if rel.startswith("train/") else "test"
        path = root / rel
        image = read_image(path, image_size, channels)
        if split == "train":
            if label != NORMAL:
                raise DatasetError(f"{rel}: training data must be normal")
            train_imgs.append(image)
            train_ids.append(rel)
            continue
        mask = _resize_mask(read_mask(root / mask_rel, path), image_size) if mask_rel else None
        test_imgs.append(image)
        test_labels.append(label)
        test_masks.append(mask)
        test_ids.append(rel)
    shape = (0, image_size, image_size, channels)
    normal = NormalImageSet(np.stack(train_imgs) if train_imgs else np.zeros(shape, np.float32), train_ids)
    test = LabeledTestSet(
        np.stack(test_imgs) if test_imgs else np.zeros(shape, np.float32),
        test_labels, test_masks, test_ids,
    )
    return normal, test


# -- synthetic data --------------------------------------------------------------


def texture_family(spec: SyntheticSpec) -> list[tuple[float, float]]:
    """Dataset-wide (orientation, period) of each grating, fixed by the seed."""
    rng = np.random.default_rng([spec.seed, 0x7E])
    return [
        (float(rng.uniform(0, np.pi)), float(rng.uniform(*spec.grating_period)))
        for _ in range(spec.n_gratings)
    ]


def _texture(rng: np.random.Generator, spec: SyntheticSpec, family) -> np.ndarray:
    size = spec.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size, spec.channels))
    jitter = np.deg2rad(spec.orientation_jitter)
    for theta0, period in family:
        theta = theta0 + rng.uniform(-jitter, jitter)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
        tint = rng.uniform(0.8, 1.0, size=spec.channels)
        img += wave[..., None] * tint
    img = 0.5 + 0.3 * img / max(spec.n_gratings, 1)
    for c in range(spec.channels):
        noise = gaussian_filter(rng.standard_normal((size, size)), spec.noise_sigma)
        noise /= noise.std() + 1e-12
        img[..., c] += spec.noise_amplitude * noise
    return np.clip(img, 0.0, 1.0)


def _inject(rng: np.random.Generator, img: np.ndarray, spec: SyntheticSpec):
    size = spec.image_size
    r = int(rng.integers(spec.anomaly_size[0], spec.anomaly_size[1] + 1))
    cy, cx = rng.integers(r, size - r, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    if spec.anomaly == "blob":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    else:
        mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    sign = rng.choice([-1.0, 1.0])
    contrast = rng.uniform(*spec.anomaly_contrast)
    out = img.copy()
    if spec.anomaly == "square":
        out[mask] = np.clip(0.5 + sign * contrast, 0.0, 1.0)
    else:
        out[mask] = out[mask] + sign * contrast
    return np.clip(out, 0.0, 1.0), mask.astype(np.uint8)


def generate_synthetic(spec: SyntheticSpec) -> tuple[NormalImageSet, LabeledTestSet]:
    """Seeded grating-plus-smoothed-noise textures; test anomalies carry exact masks.

    Grating orientations and periods are shared by the whole dataset; each image
    draws its own phases, a small orientation jitter and a smoothed-noise field.
    Anomalous test images get one injected region (disc or square) whose pixels
    are shifted or replaced.
    """
    rng = np.random.default_rng(spec.seed)
    family = texture_family(spec)
    train = np.stack([_texture(rng, spec, family) for _ in range(spec.n_train)]) if spec.n_train else None
    test_imgs, labels, masks = [], [], []
    for _ in range(spec.n_test_normal):
        test_imgs.append(_texture(rng, spec, family))
        labels.append(NORMAL)
        masks.append(None)
    for _ in range(spec.n_test_anomalous):
        img, mask = _inject(rng, _texture(rng, spec, family), spec)
        test_imgs.append(img)
        labels.append(ANOMALOUS)
        masks.append(mask)
    shape = (0, spec.image_size, spec.image_size, spec.channels)
    normal = NormalImageSet(
        train.astype(np.float32) if train is not None else np.zeros(shape, np.float32),
        [f"train_{i:05d}" for i in range(spec.n_train)],
    )
    test = LabeledTestSet(
        np.stack(test_imgs).astype(np.float32) if test_imgs else np.zeros(shape, np.float32),
        labels,
        masks,
        [f"test_{i:05d}" for i in range(len(labels))],
    )
    return normal, test


def _to_uint8(img: np.ndarray) -> Image.Image:
    arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    return Image.fromarray(arr[..., 0] if arr.shape[-1] == 1 else arr)


def write_dataset(root: str | Path, normal: NormalImageSet, test: LabeledTestSet, meta: dict | None = None) -> Path:
    """Materialise a dataset as PNGs plus a ``manifest.csv`` readable by :func:`load_folder_dataset`."""
    root = Path(root)
    rows = []
    for img, ident in zip(normal.images, normal.ids):
        rel = f"train/{NORMAL}/{ident}.png"
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
        _to_uint8(img).save(root / rel)
        rows.append(("train", rel, NORMAL, ""))
    for img, label, mask, ident in zip(test.images, test.labels, test.masks, test.ids):
        rel = f"test/{label}/{ident}.png"
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
        _to_uint8(img).save(root / rel)
        mask_rel = ""
        if mask is not None:
            mask_rel = f"test/masks/{ident}.png"
            (root / mask_rel).parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(mask.astype(np.uint8) * 255).save(root / mask_rel)
        rows.append(("test", rel, label, mask_rel))
    with open(root / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "path", "label", "mask_path"])
        writer.writerows(rows)
    if meta is not None:
        (root / "synthetic.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return root / "manifest.csv"
