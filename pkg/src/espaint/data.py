"""Desk-scale datasets: procedurally generated labeled scenes and the
folder layout the CLI reads and writes.

A scene is a backdrop (smooth gradient, periodic stripes, or a periodic
mosaic) with up to three overlaid regions (a diagonal band, a box, a disc),
each drawn from its own color family, so the ground-truth class of every
pixel is known by construction. Periodic backdrops and the legend strip give
scenes long-range structure: hole content that only distant pixels
determine, the regime spatial attention is built for.

On disk a dataset is::

    root/
      palette.json
      images/00000.png ...
      labels/00000.png ...   # grayscale, pixel value = class id
"""

from pathlib import Path

import numpy as np
import torch

from .errors import DataError
from .imaging import (
    ColorPalette,
    PaletteEntry,
    load_image_png,
    load_labels_png,
    save_image_png,
    save_labels_png,
)

CLASS_NAMES = ("backdrop", "band", "box", "disc")
DISPLAY_COLORS = ((70, 70, 70), (60, 90, 230), (60, 200, 80), (220, 50, 50))


def default_palette():
    entries = [
        PaletteEntry(i, name, rgb)
        for i, (name, rgb) in enumerate(zip(CLASS_NAMES, DISPLAY_COLORS))
    ]
    return ColorPalette(entries)


def _gradient(size, rng):
    c0 = rng.uniform(0.25, 0.9)
    c1 = rng.uniform(0.25, 0.9)
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    t = (np.cos(theta) * xx + np.sin(theta) * yy + 1.0) / 2.0
    base = c0 + (c1 - c0) * t
    tint = rng.uniform(-0.05, 0.05, size=3)
    img = np.clip(base[None] + tint[:, None, None], 0.0, 1.0)
    return img.astype(np.float32)


def _stripes(size, rng):
    # periodic field spanning the frame: hole content is exactly determined
    # by the same rows/columns outside the hole
    period = int(rng.integers(6, 15))
    phase = int(rng.integers(0, period))
    c0 = rng.uniform(0.25, 0.85, size=3)
    c1 = np.clip(c0 + rng.uniform(0.15, 0.35) * rng.choice([-1.0, 1.0]), 0.05, 0.98)
    coords = np.arange(size)
    on = ((coords + phase) % period) < period // 2
    img = np.empty((3, size, size), dtype=np.float32)
    if rng.random() < 0.5:  # vertical stripes
        img[:, :, :] = np.where(on[None, None, :], c0[:, None, None], c1[:, None, None])
    else:
        img[:, :, :] = np.where(on[None, :, None], c0[:, None, None], c1[:, None, None])
    return img


def _mosaic(size, rng):
    # tiled field whose colors repeat with a long spatial period: a hidden
    # tile's color is recoverable only from its periodic twins far away
    tile = max(4, size // 6)
    period = 3  # tiles; in pixels this exceeds a local conv stack's reach
    n_tiles = -(-size // tile)
    colors = rng.uniform(0.1, 0.95, size=(period * period, 3)).astype(np.float32)
    img = np.empty((3, size, size), dtype=np.float32)
    for ti in range(n_tiles):
        for tj in range(n_tiles):
            color = colors[(ti % period) * period + (tj % period)]
            img[:, ti * tile : (ti + 1) * tile, tj * tile : (tj + 1) * tile] = color[:, None, None]
    return img


def _family_color(rng, family):
    # band: blue, box: green, disc: red
    lo = np.array({"band": (0.05, 0.15, 0.55), "box": (0.1, 0.55, 0.1), "disc": (0.55, 0.05, 0.05)}[family])
    hi = np.array({"band": (0.35, 0.45, 0.95), "box": (0.4, 0.95, 0.45), "disc": (0.95, 0.4, 0.35)}[family])
    return rng.uniform(lo, hi).astype(np.float32)


def make_scene(size, rng):
    """One synthetic labeled scene: (image (3,s,s) float32, labels (1,s,s) int64).

    The top rows carry a legend strip showing each element's sampled color.
    Scene elements can only be reconstructed faithfully from that distant
    strip when they fall inside a hole, which mirrors the long-range color
    consistency of real photographs (a face's two cheeks, a sky's two sides)
    and keeps inpainting from degenerating into local extrapolation.
    """
    backdrop = rng.random()
    if backdrop < 1 / 3:
        image = _gradient(size, rng)
    elif backdrop < 2 / 3:
        image = _stripes(size, rng)
    else:
        image = _mosaic(size, rng)
    labels = np.zeros((size, size), dtype=np.int64)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    band_color = _family_color(rng, "band")
    box_color = _family_color(rng, "box")
    disc_color = _family_color(rng, "disc")

    if rng.random() < 0.8:  # diagonal band across the whole frame
        theta = rng.uniform(0, np.pi)
        offset = rng.uniform(-0.3, 0.3) * size
        width = rng.uniform(0.08, 0.18) * size
        dist = np.abs(np.cos(theta) * (xx - size / 2) + np.sin(theta) * (yy - size / 2) - offset)
        sel = dist < width
        image[:, sel] = band_color[:, None]
        labels[sel] = 1

    if rng.random() < 0.8:
        bh = int(rng.uniform(0.15, 0.4) * size)
        bw = int(rng.uniform(0.15, 0.4) * size)
        top = int(rng.integers(0, size - bh))
        left = int(rng.integers(0, size - bw))
        image[:, top : top + bh, left : left + bw] = box_color[:, None, None]
        labels[top : top + bh, left : left + bw] = 2

    if rng.random() < 0.8:
        r = rng.uniform(0.08, 0.2) * size
        cy = rng.uniform(r, size - r)
        cx = rng.uniform(r, size - r)
        sel = (yy - cy) ** 2 + (xx - cx) ** 2 < r**2
        image[:, sel] = disc_color[:, None]
        labels[sel] = 3

    strip = max(2, size // 16)
    third = size // 3
    for k, color in enumerate((band_color, box_color, disc_color)):
        left = k * third
        right = size if k == 2 else (k + 1) * third
        image[:, :strip, left:right] = color[:, None, None]
        labels[:strip, left:right] = k + 1

    return image, labels[None]


class SyntheticScenes:
    """Deterministic in-memory dataset; sample i is a pure function of (seed, i)."""

    def __init__(self, count, size, seed=0):
        self.count = count
        self.size = size
        self.seed = seed
        self.palette = default_palette()
        self.num_classes = self.palette.num_classes

    def __len__(self):
        return self.count

    def __getitem__(self, index):
        rng = np.random.default_rng((self.seed, index))
        image, labels = make_scene(self.size, rng)
        return {
            "image": torch.from_numpy(image),
            "labels": torch.from_numpy(labels),
            "key": f"{index:05d}",
        }


class FolderDataset:
    """Reads the on-disk layout produced by :func:`write_dataset`."""

    def __init__(self, root):
        self.root = Path(root)
        if not (self.root / "palette.json").exists():
            raise DataError(f"{self.root} has no palette.json")
        self.palette = ColorPalette.load(self.root / "palette.json")
        self.num_classes = self.palette.num_classes
        self.image_paths = sorted((self.root / "images").glob("*.png"))
        if not self.image_paths:
            raise DataError(f"no images under {self.root / 'images'}")
        first = load_image_png(self.image_paths[0])
        self.size = first.shape[-1]

    def __len__(self):
        return len(self.image_paths)

    def __getitem__(self, index):
        path = self.image_paths[index]
        key = path.stem
        image = load_image_png(path)
        labels_path = self.root / "labels" / f"{key}.png"
        if not labels_path.exists():
            raise DataError(f"missing label map for sample {key}")
        labels = load_labels_png(labels_path, self.num_classes)
        return {
            "image": torch.from_numpy(image),
            "labels": torch.from_numpy(labels),
            "key": key,
        }


def write_dataset(out_dir, count, size, seed=0):
    """Materialize a synthetic dataset to disk; returns the root path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    ds = SyntheticScenes(count, size, seed)
    ds.palette.save(out / "palette.json")
    for i in range(count):
        sample = ds[i]
        key = sample["key"]
        save_image_png(sample["image"].numpy(), out / "images" / f"{key}.png")
        save_labels_png(sample["labels"].numpy(), out / "labels" / f"{key}.png")
    return out
