"""Deterministic synthetic segmentation scenes and their on-disk layout.

A split directory looks like::

    <root>/<split>/manifest.json
    <root>/<split>/images/<id>.png   8-bit RGB
    <root>/<split>/masks/<id>.png    8-bit palette PNG (index = class id)

``manifest.json`` fields: ``format``, ``version``, ``split``, ``n_images``,
``height``, ``width``, ``num_classes``, ``background_class``, ``seed``,
``images`` (list of ``{"id", "image", "mask"}`` with paths relative to the split
directory) and ``class_pixel_counts``.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core import ConfigError, as_labels, background_class, substream
from .metrics import class_pixel_counts

MANIFEST_FORMAT = "segrobust-split"
MANIFEST_VERSION = 1
SHAPE_KINDS = ("rectangle", "disk", "triangle")


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, 3) float64 in [0, 1]
    labels: np.ndarray  # (N, H, W) int64
    num_classes: int
    ids: list = field(default_factory=list)
    split: str = "train"
    seed: int = 0

    def __post_init__(self):
        if not self.ids:
            self.ids = [f"{i:04d}" for i in range(len(self.images))]
        if len(self.ids) != len(self.images) or self.labels.shape != self.images.shape[:3]:
            raise ConfigError("images, labels and ids disagree in length or shape")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, indices) -> "Dataset":
        indices = list(indices)
        return Dataset(self.images[indices], self.labels[indices], self.num_classes,
                       [self.ids[i] for i in indices], self.split, self.seed)

    def class_stats(self):
        return class_pixel_counts(self.labels, self.num_classes)


def class_palette(num_classes: int) -> np.ndarray:
    """Fixed ``(K, 3)`` uint8 palette: evenly spaced hues, background gray."""
    colors = []
    for s in range(num_classes - 1):
        r, g, b = colorsys.hsv_to_rgb(s / max(num_classes - 1, 1), 0.85, 0.9)
        colors.append((r, g, b))
    colors.append((0.5, 0.5, 0.5))
    return np.round(np.array(colors) * 255).astype(np.uint8)


def _shape_mask(kind, h, w, rng, min_size, max_size):
    size = int(rng.integers(min_size, max_size + 1))
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    ii, jj = np.mgrid[0:h, 0:w]
    if kind == "rectangle":
        width = int(rng.integers(max(min_size // 2, 2), size + 1))
        return (ii >= top) & (ii < top + size) & (jj >= left) & (jj < left + width)
    if kind == "disk":
        r = size / 2.0
        cy, cx = top + r - 0.5, left + r - 0.5
        return (ii - cy) ** 2 + (jj - cx) ** 2 <= r * r
    # triangle: apex on the top edge, base on the bottom edge of the box
    apex = left + rng.uniform(0, size)
    y0, y1 = top, top + size - 1
    frac = np.clip((ii - y0) / max(y1 - y0, 1), 0, 1)
    lo = apex + (left - apex) * frac
    hi = apex + (left + size - 1 - apex) * frac
    return (ii >= y0) & (ii <= y1) & (jj >= np.floor(lo)) & (jj <= np.ceil(hi))


def _background(h, w, rng, amplitude, noise):
    ii, jj = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.full((h, w, 3), 0.5)
    for _ in range(3):
        fy, fx = rng.uniform(1.0, 4.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(-amplitude, amplitude, size=3)
        img += amp * np.sin(2 * np.pi * (fy * ii + fx * jj) + phase)[..., None]
    img += rng.uniform(-noise, noise, size=(h, w, 3))
    return img


def render_scene(rng, h, w, num_classes, first_class=None, max_shapes=4,
                 contrast=0.3, texture=0.01, noise=0.01):
    """Draw one image and its exact label map.

    Fill colors are the palette pulled towards mid-gray by ``contrast``, so
    classes sit a few tens of gray levels apart; ``texture`` is the amplitude
    of the smooth background pattern and ``noise`` the per-pixel jitter.

    When ``first_class`` is given, the topmost shape uses that class so that
    callers can guarantee class coverage.
    """
    fills = 0.5 + contrast * (class_palette(num_classes).astype(np.float64) / 255 - 0.5)
    img = _background(h, w, rng, texture, noise)
    labels = np.full((h, w), background_class(num_classes), dtype=np.int64)
    min_size, max_size = _size_range(h, w)
    n_shapes = int(rng.integers(1, max_shapes + 1))
    classes = rng.integers(0, num_classes - 1, size=n_shapes)
    if first_class is not None:
        classes[-1] = first_class
    for cls in classes:
        kind = SHAPE_KINDS[int(rng.integers(0, len(SHAPE_KINDS)))]
        mask = _shape_mask(kind, h, w, rng, min_size, max_size)
        fill = fills[cls] + rng.uniform(-noise, noise, size=(h, w, 3))
        img[mask] = fill[mask]
        labels[mask] = cls
    return np.clip(img, 0.0, 1.0), labels


def _size_range(h, w):
    side = min(h, w)
    return max(side // 4, 3), max(2 * side // 3, 4)


def generate_dataset(seed: int, n_images: int, height: int = 32, width: int = 32,
                     num_classes: int = 6, split: str = "train", max_shapes: int = 4,
                     contrast: float = 0.3, texture: float = 0.01) -> Dataset:
    """Synthetic scenes with 1..max_shapes low-contrast shapes on a textured background.

    Class identity is carried by the fill color; background is class ``K-1``.
    ``contrast`` scales the distance between class colors (1 = full palette) and
    ``texture`` is the amplitude of each of the three background sinusoids.
    Images are quantized to 8 bits so that saved and in-memory copies agree.
    """
    if num_classes < 2:
        raise ConfigError("need K >= 2")
    if height < 16 or width < 16:
        raise ConfigError("images must be at least 16x16")
    if n_images < 1:
        raise ConfigError("need at least one image")
    if not 0 < contrast <= 1:
        raise ConfigError("contrast must lie in (0, 1]")
    if not 0 <= texture <= 0.5:
        raise ConfigError("texture must lie in [0, 0.5]")
    min_side = _size_range(height, width)[0]
    if max_shapes < 1 or max_shapes * min_side * min_side * 2 > height * width:
        raise ConfigError(f"{max_shapes} shapes do not fit on a {height}x{width} canvas")
    images = np.empty((n_images, height, width, 3))
    labels = np.empty((n_images, height, width), dtype=np.int64)
    for i in range(n_images):
        rng = substream(seed, f"dataset:{split}", i)
        img, lab = render_scene(rng, height, width, num_classes,
                                first_class=i % (num_classes - 1), max_shapes=max_shapes,
                                contrast=contrast, texture=texture)
        images[i] = quantize(img) / 255.0
        labels[i] = lab
    return Dataset(images, labels, num_classes, split=split, seed=seed)


def patch_dataset(ds: Dataset, patch: int = 8, stride: int = 4, balance: bool = False):
    """Crop square patches labelled by their dominant class (ties -> lowest id).

    With ``balance`` every class is subsampled (seeded by the dataset seed) to
    the size of the rarest class that occurs.
    """
    n, h, w, c = ds.images.shape
    if not 1 <= patch <= min(h, w) or stride < 1:
        raise ConfigError(f"patch {patch} / stride {stride} do not fit {h}x{w} images")
    xs, ys = [], []
    for i in range(n):
        for top in range(0, h - patch + 1, stride):
            for left in range(0, w - patch + 1, stride):
                lab = ds.labels[i, top:top + patch, left:left + patch]
                xs.append(ds.images[i, top:top + patch, left:left + patch])
                ys.append(int(np.argmax(np.bincount(lab.ravel(), minlength=ds.num_classes))))
    x, y = np.array(xs), np.array(ys, dtype=np.int64)
    if balance:
        rng = substream(ds.seed, f"patches:{ds.split}")
        counts = np.bincount(y, minlength=ds.num_classes)
        m = counts[counts > 0].min()
        keep = np.sort(np.concatenate([rng.choice(np.flatnonzero(y == s), m, replace=False)
                                       for s in range(ds.num_classes) if counts[s]]))
        x, y = x[keep], y[keep]
    return x, y


# -- IO --------------------------------------------------------------------------

def quantize(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.size and (np.nanmin(img) < 0 or np.nanmax(img) > 1 or not np.all(np.isfinite(img))):
        raise ConfigError("image values must lie in [0, 1]")
    return np.round(img * 255).astype(np.uint8)


def save_image(img, path) -> None:
    Image.fromarray(quantize(img), mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise ConfigError(f"{path}: expected RGB image, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except OSError as exc:
        raise ConfigError(f"cannot read image {path}: {exc}") from exc
    return arr.astype(np.float64) / 255.0


def save_mask(labels, path, num_classes: int) -> None:
    labels = as_labels(labels, num_classes)
    if num_classes > 256:
        raise ConfigError("palette masks hold at most 256 classes")
    im = Image.fromarray(labels.astype(np.uint8), mode="P")
    pal = np.zeros((256, 3), dtype=np.uint8)
    pal[:num_classes] = class_palette(num_classes)
    im.putpalette(pal.ravel().tolist())
    im.save(path, format="PNG")


def load_mask(path, num_classes: int | None = None) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("P", "L"):
                raise ConfigError(f"{path}: expected an indexed mask, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.uint8).astype(np.int64)
    except OSError as exc:
        raise ConfigError(f"cannot read mask {path}: {exc}") from exc
    return as_labels(arr, num_classes)


def colorize(labels, num_classes: int) -> np.ndarray:
    return class_palette(num_classes)[as_labels(labels, num_classes)]


def save_split(ds: Dataset, root) -> Path:
    root = Path(root) / ds.split
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for img_id, img, lab in zip(ds.ids, ds.images, ds.labels):
        rec = {"id": img_id, "image": f"images/{img_id}.png", "mask": f"masks/{img_id}.png"}
        save_image(img, root / rec["image"])
        save_mask(lab, root / rec["mask"], ds.num_classes)
        records.append(rec)
    n, h, w, _ = ds.images.shape
    manifest = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "split": ds.split,
                "n_images": n, "height": h, "width": w, "num_classes": ds.num_classes,
                "background_class": background_class(ds.num_classes), "seed": ds.seed,
                "images": records, "class_pixel_counts": ds.class_stats().counts.tolist()}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root


def load_split(path) -> Dataset:
    """Load a split directory (or its manifest.json) and check declared shapes."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ConfigError(f"{path} is not a split manifest")
    root = path.parent
    k, h, w = manifest["num_classes"], manifest["height"], manifest["width"]
    images, labels, ids = [], [], []
    for rec in manifest["images"]:
        img = load_image(root / rec["image"])
        lab = load_mask(root / rec["mask"], k)
        if img.shape != (h, w, 3) or lab.shape != (h, w):
            raise ConfigError(f"{rec['id']}: shape does not match manifest")
        images.append(img)
        labels.append(lab)
        ids.append(rec["id"])
    if len(ids) != manifest["n_images"]:
        raise ConfigError("manifest image count mismatch")
    return Dataset(np.array(images), np.array(labels), k, ids, manifest["split"],
                   manifest.get("seed", 0))
