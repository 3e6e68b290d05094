"""Canonical image, mask and label-map representations plus compositing arithmetic.

Conventions used across the whole package:

* images are float32 numpy arrays of shape (3, H, W) with values in [0, 1],
  RGB channel order; H and W are divisible by 4,
* binary masks are (1, H, W) float32 arrays over {0, 1}, 1 marks damaged pixels,
* label maps are (1, H, W) int64 arrays with values in [0, num_classes).

Everything here is a pure function over immutable inputs; 8-bit conversion
happens only at the PNG boundary.
"""

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import DataError, DimensionError, PaletteError, UnknownColorError

# L-inf tolerance (per channel, [0,1] scale) when mapping colors back to labels;
# absorbs 8-bit PNG quantization.
DEFAULT_COLOR_TOLERANCE = 2.0 / 255.0


def validate_image(image):
    """Check the (3, H, W), [0, 1], finite, 4-divisible contract and return float32."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DimensionError(f"expected image of shape (3, H, W), got {arr.shape}")
    if arr.shape[1] % 4 or arr.shape[2] % 4:
        raise DimensionError(f"image H and W must be divisible by 4, got {arr.shape[1:]}")
    if not np.isfinite(arr).all():
        raise DimensionError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise DimensionError("image values must lie in [0, 1]")
    return arr


def validate_mask(mask):
    """Check the (1, H, W) strictly-binary contract and return float32."""
    arr = np.asarray(mask, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] != 1:
        raise DimensionError(f"expected mask of shape (1, H, W), got {arr.shape}")
    if not np.isin(arr, (0.0, 1.0)).all():
        raise DimensionError("mask values must be exactly 0 or 1")
    return arr


def validate_labels(labels, num_classes):
    """Check the (1, H, W) integer label contract and return int64."""
    arr = np.asarray(labels)
    if arr.ndim != 3 or arr.shape[0] != 1:
        raise DimensionError(f"expected labels of shape (1, H, W), got {arr.shape}")
    arr = arr.astype(np.int64)
    if arr.min() < 0 or arr.max() >= num_classes:
        raise PaletteError(
            f"labels must lie in [0, {num_classes}), got range [{arr.min()}, {arr.max()}]"
        )
    return arr


def _check_same_spatial(a, b, what):
    if a.shape[-2:] != b.shape[-2:]:
        raise DimensionError(f"{what}: spatial sizes differ, {a.shape[-2:]} vs {b.shape[-2:]}")


def apply_mask(image, mask):
    """Zero out the damaged region: returns image * (1 - mask)."""
    image = validate_image(image)
    mask = validate_mask(mask)
    _check_same_spatial(image, mask, "apply_mask")
    return image * (1.0 - mask)


def composite(result, original, mask):
    """Paste generated pixels into the hole: result * mask + original * (1 - mask)."""
    result = validate_image(result)
    original = validate_image(original)
    mask = validate_mask(mask)
    _check_same_spatial(result, original, "composite")
    _check_same_spatial(result, mask, "composite")
    return result * mask + original * (1.0 - mask)


def downsample_mask(mask, factor):
    """Block-max pool a binary mask by an integer factor.

    A block containing any damaged pixel is damaged in the output, so a
    partially damaged block never leaks unreconstructed context downstream.
    """
    mask = validate_mask(mask)
    factor = int(factor)
    if factor < 1:
        raise DimensionError(f"downsample factor must be >= 1, got {factor}")
    _, h, w = mask.shape
    if h % factor or w % factor:
        raise DimensionError(f"mask size {h}x{w} not divisible by factor {factor}")
    blocks = mask.reshape(1, h // factor, factor, w // factor, factor)
    return blocks.max(axis=(2, 4))


def one_hot(labels, num_classes):
    """Expand a label map to a (num_classes, H, W) {0,1} map, one 1 per pixel."""
    labels = validate_labels(labels, num_classes)
    eye = np.eye(num_classes, dtype=np.float32)
    return np.transpose(eye[labels[0]], (2, 0, 1))


@dataclass(frozen=True)
class PaletteEntry:
    id: int
    name: str
    rgb: tuple  # 8-bit (r, g, b)


class ColorPalette:
    """Bijective class <-> display-color map used for pseudo-color mask editing."""

    def __init__(self, entries):
        entries = sorted(entries, key=lambda e: e.id)
        ids = [e.id for e in entries]
        if ids != list(range(len(entries))):
            raise PaletteError(f"class ids must be 0..{len(entries) - 1} with no gaps, got {ids}")
        colors = [tuple(e.rgb) for e in entries]
        if len(set(colors)) != len(colors):
            raise PaletteError("palette colors must be pairwise distinct")
        for c in colors:
            if len(c) != 3 or any(not (0 <= v <= 255) for v in c):
                raise PaletteError(f"palette colors must be 8-bit RGB triples, got {c}")
        self.entries = entries

    @property
    def num_classes(self):
        return len(self.entries)

    def colors01(self):
        """(num_classes, 3) float64 array of palette colors on the [0, 1] scale."""
        return np.array([e.rgb for e in self.entries], dtype=np.float64) / 255.0

    def to_json(self):
        return json.dumps(
            [{"id": e.id, "name": e.name, "rgb": list(e.rgb)} for e in self.entries],
            indent=2,
        )

    @classmethod
    def from_json(cls, text):
        try:
            raw = json.loads(text)
            entries = [PaletteEntry(int(d["id"]), str(d["name"]), tuple(d["rgb"])) for d in raw]
        except (ValueError, KeyError, TypeError) as exc:
            raise PaletteError(f"malformed palette document: {exc}") from exc
        return cls(entries)

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())


def labels_to_pseudocolor(labels, palette):
    """Paint each pixel with its class color; output is a regular [0,1] image."""
    labels = validate_labels(labels, palette.num_classes)
    lut = palette.colors01().astype(np.float32)  # (K, 3)
    return np.transpose(lut[labels[0]], (2, 0, 1))


def pseudocolor_to_labels(image, palette, tolerance=DEFAULT_COLOR_TOLERANCE):
    """Invert :func:`labels_to_pseudocolor` by nearest-palette-color assignment.

    Pixels farther (L-inf, per channel) than ``tolerance`` from every palette
    color raise :class:`UnknownColorError` listing the offending coordinates.
    Exact palette colors always map exactly.
    """
    image = validate_image(image)
    h, w = image.shape[1:]
    colors = palette.colors01()  # (K, 3)
    pixels = image.reshape(3, -1).T.astype(np.float64)  # (N, 3)
    # L-inf distance of every pixel to every palette color
    dist = np.abs(pixels[:, None, :] - colors[None, :, :]).max(axis=2)  # (N, K)
    labels = dist.argmin(axis=1)
    nearest = dist[np.arange(dist.shape[0]), labels]
    bad = nearest > tolerance + 1e-12
    if bad.any():
        flat = np.flatnonzero(bad)
        coords = [(int(i // w), int(i % w)) for i in flat[:16]]
        raise UnknownColorError(
            f"{flat.size} pixel(s) do not match any palette color within "
            f"tolerance {tolerance:.6f}; first offenders (row, col): {coords}",
            coords,
        )
    return labels.reshape(1, h, w)


# --- PNG / file boundary -----------------------------------------------------


def load_image_png(path):
    """Read an 8-bit RGB PNG into a [0,1] float image."""
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return np.transpose(arr, (2, 0, 1))


def _atomic_png(pil_image, path):
    # write-temp-then-rename so failures never leave half-written outputs
    path = Path(path)
    tmp = path.with_suffix(".tmp.png")
    pil_image.save(tmp, format="PNG")
    os.replace(tmp, path)


def save_image_png(image, path):
    image = validate_image(image)
    arr = np.round(np.transpose(image, (1, 2, 0)) * 255.0).astype(np.uint8)
    _atomic_png(PILImage.fromarray(arr, mode="RGB"), path)


def load_mask_png(path):
    """Read an 8-bit grayscale PNG as a binary mask; values >= 128 become 1."""
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc
    return (arr >= 128.0).astype(np.float32)[None]


def save_mask_png(mask, path):
    mask = validate_mask(mask)
    _atomic_png(PILImage.fromarray((mask[0] * 255.0).astype(np.uint8), mode="L"), path)


def load_labels_png(path, num_classes):
    """Read a label map stored as an 8-bit grayscale PNG (pixel value = class id)."""
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.int64)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read label map {path}: {exc}") from exc
    return validate_labels(arr[None], num_classes)


def save_labels_png(labels, path):
    if np.max(labels) > 255:
        raise PaletteError("grayscale label PNGs support at most 256 classes")
    _atomic_png(PILImage.fromarray(np.asarray(labels)[0].astype(np.uint8), mode="L"), path)


def resize_image(image, size):
    """Bilinear-resize a [0,1] image to ``size`` x ``size`` (ingestion policy)."""
    image = np.clip(np.asarray(image, dtype=np.float32), 0.0, 1.0)
    arr = np.round(np.transpose(image, (1, 2, 0)) * 255.0).astype(np.uint8)
    im = PILImage.fromarray(arr, mode="RGB").resize((size, size), PILImage.BILINEAR)
    return np.transpose(np.asarray(im, dtype=np.float32) / 255.0, (2, 0, 1))


def resize_mask(mask, size):
    """Nearest-resize a binary mask to ``size`` x ``size`` (stays binary)."""
    mask = validate_mask(mask)
    im = PILImage.fromarray((mask[0] * 255.0).astype(np.uint8), mode="L")
    arr = np.asarray(im.resize((size, size), PILImage.NEAREST), dtype=np.float32)
    return (arr >= 128.0).astype(np.float32)[None]
