"""Synthetic desk-scale dataset: eight procedural shape classes on textured
backgrounds.

Classes are geometric patterns (disk, square, diamond, cross, horizontal and
vertical bars, checkerboard, ring) drawn with random size, position, polarity
and contrast over a noisy background. Class identity lives purely in the
spatial pattern, so pixel corruptions genuinely hurt a trained classifier.

Per-image randomness is derived from (seed, split, index), which makes
generation reproducible byte-for-byte and keeps train/test streams disjoint
by construction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import load_tensor, save_tensor
from .errors import ConfigError, FormatError

N_SHAPE_CLASSES = 8
SPLIT_CODES = {"train": 1, "test": 2}

IMAGES_FILE = "images.pcsr-tensor"
LABELS_FILE = "labels.csv"
MANIFEST_FILE = "manifest.txt"


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 8
    n_train: int = 4096
    n_test: int = 1024
    image_size: int = 32
    seed: int = 1
    contrast_lo: float = 0.18     # shape/background intensity gap
    contrast_hi: float = 0.42
    background_noise: float = 0.03

    def __post_init__(self):
        if not 2 <= self.n_classes <= N_SHAPE_CLASSES:
            raise ConfigError(f"n_classes must be in 2..{N_SHAPE_CLASSES}, got {self.n_classes}")
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        if not 0 < self.contrast_lo <= self.contrast_hi:
            raise ConfigError("need 0 < contrast_lo <= contrast_hi")


def _shape_mask(kind: int, size: int, rng) -> np.ndarray:
    """One binary [S,S] mask for the given class kind.

    All eight classes are solid geometric figures, so pixel noise does not
    mimic any class-defining texture and corruption errors spread across
    neighboring shapes instead of collapsing into one attractor class.
    """
    s = size
    cy = s / 2 + rng.uniform(-s / 8, s / 8)
    cx = s / 2 + rng.uniform(-s / 8, s / 8)
    r = rng.uniform(0.22, 0.36) * s
    yy, xx = np.mgrid[0:s, 0:s]
    dy, dx = yy - cy, xx - cx
    dist = np.sqrt(dy * dy + dx * dx)
    if kind == 0:  # disk
        return dist <= r
    if kind == 1:  # square
        return (np.abs(dy) <= r * 0.9) & (np.abs(dx) <= r * 0.9)
    if kind == 2:  # diamond
        return (np.abs(dy) + np.abs(dx)) <= r * 1.25
    if kind == 3:  # plus
        w = r * 0.38
        return ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | ((np.abs(dy) <= w) & (np.abs(dx) <= r))
    if kind == 4:  # ring
        return (dist <= r) & (dist >= r * 0.55)
    if kind == 5:  # triangle, point up
        span = np.clip((dy + r) / (1.75 * r), 0.0, 1.0)
        return (dy >= -r) & (dy <= 0.75 * r) & (np.abs(dx) <= 0.95 * r * span)
    if kind == 6:  # diagonal cross
        w = r * 0.45
        arms = (np.abs(dx - dy) <= w) | (np.abs(dx + dy) <= w)
        return arms & (dist <= 1.1 * r)
    if kind == 7:  # thick horizontal bar
        return (np.abs(dy) <= 0.35 * r) & (np.abs(dx) <= 1.15 * r)
    raise ConfigError(f"unknown shape kind {kind}")


def render_image(spec: SyntheticSpec, split: str, index: int, label: int) -> np.ndarray:
    """One [3,S,S] image in [0,1], fully determined by (spec.seed, split, index)."""
    ss = np.random.SeedSequence([spec.seed, SPLIT_CODES[split], index])
    rng = np.random.default_rng(ss)
    s = spec.image_size
    background = rng.uniform(0.35, 0.65)
    contrast = rng.uniform(spec.contrast_lo, spec.contrast_hi)
    if rng.random() < 0.5:
        contrast = -contrast  # polarity flip: shape may be darker or brighter
    mask = _shape_mask(label, s, rng).astype(np.float32)
    gray = background + contrast * mask
    gains = rng.uniform(0.92, 1.08, size=(3, 1, 1))
    img = gray[None, :, :] * gains
    img = img + rng.normal(0.0, spec.background_noise, size=(3, s, s))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_split(spec: SyntheticSpec, split: str) -> tuple[np.ndarray, np.ndarray]:
    """All images and labels for one split; labels are balanced by index."""
    if split not in SPLIT_CODES:
        raise ConfigError(f"split must be one of {sorted(SPLIT_CODES)}, got {split!r}")
    n = spec.n_train if split == "train" else spec.n_test
    labels = (np.arange(n) % spec.n_classes).astype(np.int64)
    images = np.empty((n, 3, spec.image_size, spec.image_size), dtype=np.float32)
    for i in range(n):
        images[i] = render_image(spec, split, i, int(labels[i]))
    return images, labels


def normalize(images: np.ndarray) -> np.ndarray:
    """Map [0,1] pixels to [-1,1]: (x - 0.5) / 0.5 per channel."""
    return ((images - 0.5) / 0.5).astype(np.float32)


def _write_labels(path: Path, labels: np.ndarray):
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp, lineterminator="\n")
        writer.writerow(["index", "label"])
        for i, y in enumerate(labels):
            writer.writerow([i, int(y)])


def _read_labels(path: Path) -> np.ndarray:
    with open(path, newline="") as fp:
        reader = csv.reader(fp)
        header = next(reader, None)
        if header != ["index", "label"]:
            raise FormatError(f"{path}: expected header index,label, got {header}")
        labels = [int(row[1]) for row in reader]
    return np.asarray(labels, dtype=np.int64)


def make_dataset(spec: SyntheticSpec, out_dir: str | Path) -> Path:
    """Write train/test splits under `out_dir` and return it.

    Layout: {train,test}/images.pcsr-tensor + labels.csv, plus a key=value
    manifest.txt describing both splits.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [
        "format=pcsr-dataset-v1",
        "kind=synthetic-shapes",
        f"n_classes={spec.n_classes}",
        f"image_size={spec.image_size}",
        f"seed={spec.seed}",
        f"contrast_lo={spec.contrast_lo}",
        f"contrast_hi={spec.contrast_hi}",
        f"background_noise={spec.background_noise}",
    ]
    for split in ("train", "test"):
        images, labels = generate_split(spec, split)
        split_dir = out / split
        split_dir.mkdir(exist_ok=True)
        save_tensor(split_dir / IMAGES_FILE, images)
        _write_labels(split_dir / LABELS_FILE, labels)
        lines.append(f"split.{split}.count={len(labels)}")
    (out / MANIFEST_FILE).write_text("\n".join(lines) + "\n")
    return out


def read_manifest(dataset_dir: str | Path) -> dict[str, str]:
    path = Path(dataset_dir) / MANIFEST_FILE
    if not path.exists():
        raise FormatError(f"missing dataset manifest: {path}")
    out: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_split(dataset_dir: str | Path, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Raw [n,3,S,S] images in [0,1] plus labels for one split."""
    split_dir = Path(dataset_dir) / split
    images_path = split_dir / IMAGES_FILE
    labels_path = split_dir / LABELS_FILE
    if not images_path.exists():
        raise FormatError(f"missing dataset file: {images_path}")
    if not labels_path.exists():
        raise FormatError(f"missing dataset file: {labels_path}")
    images = load_tensor(images_path)
    labels = _read_labels(labels_path)
    if images.ndim != 4 or len(images) != len(labels):
        raise FormatError(f"{images_path}: images/labels mismatch")
    return images, labels
