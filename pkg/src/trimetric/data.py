"""Identity-labelled image datasets, resizing, crop augmentation and splits."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, InvalidShapeError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".ppm", ".pgm", ".pnm", ".jpg", ".jpeg", ".bmp"}


@dataclass
class LabeledImage:
    pixels: np.ndarray
    person_id: Hashable
    source: str = "synthetic"


@dataclass
class Dataset:
    images: list[LabeledImage]
    templates: np.ndarray | None = field(default=None, repr=False)
    by_class: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.by_class = {}
        for i, img in enumerate(self.images):
            self.by_class.setdefault(img.person_id, []).append(i)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def classes(self) -> list:
        return list(self.by_class)

    @property
    def labels(self) -> list:
        return [img.person_id for img in self.images]

    def subset_by_class(self, classes: Sequence[Hashable]) -> "Dataset":
        keep = set(classes)
        return Dataset([img for img in self.images if img.person_id in keep])


@dataclass(frozen=True)
class AugmentConfig:
    crop_height: int = 230
    crop_width: int = 80
    radius: int = 5

    def __post_init__(self):
        if self.crop_height < 1 or self.crop_width < 1 or self.radius < 0:
            raise ConfigError(f"invalid augmentation settings {self}")

    def check_fits(self, height: int, width: int) -> None:
        if self.crop_height + 2 * self.radius > height or self.crop_width + 2 * self.radius > width:
            raise ConfigError(
                f"crop {self.crop_height}x{self.crop_width} with radius {self.radius} "
                f"does not fit a {height}x{width} image")


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def _interp_axis(n_in: int, n_out: int):
    # half-pixel centres, edge clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a (C, H, W) image."""
    image = np.asarray(image, dtype=np.float64)
    if height < 1 or width < 1:
        raise InvalidShapeError(f"target size must be positive, got {height}x{width}")
    if image.ndim != 3 or image.size == 0:
        raise InvalidShapeError(f"expected a non-empty (C,H,W) image, got shape {image.shape}")
    _, h, w = image.shape
    if (h, w) == (height, width):
        return image.copy()
    r0, r1, fr = _interp_axis(h, height)
    c0, c1, fc = _interp_axis(w, width)
    top = image[:, r0][:, :, c0] * (1 - fc) + image[:, r0][:, :, c1] * fc
    bot = image[:, r1][:, :, c0] * (1 - fc) + image[:, r1][:, :, c1] * fc
    out = top * (1 - fr)[:, None] + bot * fr[:, None]
    return np.clip(out, 0.0, 1.0)


def crop(image: np.ndarray, height: int, width: int, dy: int = 0, dx: int = 0) -> np.ndarray:
    """Crop of the given size centred on the image, shifted by (dy, dx)."""
    _, h, w = image.shape
    top = (h - height) // 2 + dy
    left = (w - width) // 2 + dx
    if top < 0 or left < 0 or top + height > h or left + width > w:
        raise InvalidShapeError(f"crop {height}x{width} at offset ({dy},{dx}) leaves a {h}x{w} image")
    return image[:, top:top + height, left:left + width]


def center_crop(image: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    return crop(image, cfg.crop_height, cfg.crop_width)


def augment_crop(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    dy, dx = rng.integers(-cfg.radius, cfg.radius + 1, size=2)
    return crop(image, cfg.crop_height, cfg.crop_width, int(dy), int(dx))


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def write_image(path, pixels: np.ndarray) -> None:
    arr = np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path)


def load_dataset(root, size: tuple[int, int] | None = (250, 100)) -> Dataset:
    """Load ``root/<person_id>/<image>`` into a Dataset, resizing to ``size`` (H, W).

    Identities and files are visited in lexicographic order. Unreadable files
    and empty identity directories are skipped with a warning.
    """
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"dataset root {root} is not a directory")
    images = []
    for person_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        loaded = 0
        for path in sorted(p for p in person_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
            try:
                pixels = read_image(path)
            except Exception as exc:  # PIL raises a zoo of exception types
                log.warning("skipping unreadable image %s: %s", path, exc)
                continue
            if size is not None:
                pixels = resize(pixels, *size)
            images.append(LabeledImage(pixels, person_dir.name, str(path)))
            loaded += 1
        if loaded == 0:
            log.warning("identity %s has no readable images; omitted", person_dir.name)
    if not images:
        raise ConfigError(f"no images found under {root}")
    return Dataset(images)


def save_dataset(dataset: Dataset, root) -> list[Path]:
    root = Path(root)
    written = []
    for pid, indices in dataset.by_class.items():
        d = root / str(pid)
        d.mkdir(parents=True, exist_ok=True)
        for k, i in enumerate(indices):
            path = d / f"{k:04d}.png"
            write_image(path, dataset.images[i].pixels)
            written.append(path)
    return written


# ---------------------------------------------------------------------------
# splits and synthetic data
# ---------------------------------------------------------------------------

def split_train_test(dataset: Dataset, train_fraction: float, rng: np.random.Generator):
    """Split by identity: no person appears on both sides."""
    classes = dataset.classes
    if len(classes) < 2:
        raise ConfigError("need at least two identities to split")
    n_train = math.floor(len(classes) * train_fraction + 1e-9)
    n_train = min(max(n_train, 1), len(classes) - 1)
    order = rng.permutation(len(classes))
    train = [classes[i] for i in sorted(order[:n_train])]
    test = [classes[i] for i in sorted(order[n_train:])]
    return dataset.subset_by_class(train), dataset.subset_by_class(test)


def _templates(num_classes: int, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    # three horizontal bands (head/torso/legs) with a stripe pattern on the torso
    bands = np.array_split(np.arange(height), 3)
    templates = np.empty((num_classes, 3, height, width))
    colors = []
    while len(colors) < num_classes:
        cand = rng.uniform(0.15, 0.85, size=(3, 3))
        if all(np.abs(cand - c).max() > 0.25 for c in colors):
            colors.append(cand)
    for k, col in enumerate(colors):
        period = 2 + k % 3
        for b, rows in enumerate(bands):
            templates[k, :, rows[0]:rows[-1] + 1, :] = col[b][:, None, None]
        mask = np.zeros((height, width), dtype=bool)
        mask[bands[1][0]:bands[1][-1] + 1] = (np.arange(width) // period) % 2 == 0
        templates[k][:, mask] *= 0.8
    return templates


def synth_dataset(num_classes: int, images_per_class: int, noise_level: float,
                  rng: np.random.Generator, height: int = 20, width: int = 12) -> Dataset:
    """Colour/stripe identity templates plus uniform noise and a brightness shift."""
    if num_classes < 2:
        raise ConfigError("synthetic dataset needs at least two classes")
    templates = _templates(num_classes, height, width, rng)
    images = []
    for k in range(num_classes):
        for _ in range(images_per_class):
            noise = rng.uniform(-noise_level, noise_level, size=templates[k].shape)
            shift = rng.uniform(-noise_level, noise_level)
            pixels = np.clip(templates[k] + noise + shift, 0.0, 1.0)
            images.append(LabeledImage(pixels, f"p{k:03d}"))
    return Dataset(images, templates)
