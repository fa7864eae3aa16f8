"""Six-channel network input and automatic tissue masks."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from skimage.color import hsv2rgb, rgb2hsv
from skimage.filters import threshold_otsu
from skimage.morphology import binary_closing, binary_opening, disk, remove_small_holes


@dataclass(frozen=True)
class TissueMaskParams:
    radius: int = 5  # px at X20
    min_hole_area: int = 1024


def load_rgb(path: str | Path) -> np.ndarray:
    """Read an 8-bit raster as float RGB in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def load_rgb_u8(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def as_unit_rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected H x W x 3 RGB, got {img.shape}")
    if img.size and (img.min() < 0 or img.max() > 1):
        raise ValueError("RGB values must lie in [0, 1]")
    return img


def to_six_channel(img: np.ndarray) -> np.ndarray:
    """Stack RGB with its HSV transform; hue is scaled to [0, 1]."""
    rgb = as_unit_rgb(img)
    hsv = rgb2hsv(rgb) if rgb.size else np.zeros_like(rgb)
    return np.concatenate([rgb, hsv], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    return hsv2rgb(hsv)


def saturation(img: np.ndarray) -> np.ndarray:
    rgb = as_unit_rgb(img)
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    out = np.zeros_like(mx)
    np.divide(mx - mn, mx, out=out, where=mx > 0)
    return out


def make_tissue_mask(img: np.ndarray, params: TissueMaskParams = TissueMaskParams()) -> np.ndarray:
    """Boolean tissue mask: Otsu on saturation, closing, opening, small-hole fill.

    An image with a single saturation level (e.g. blank white) has no tissue.
    """
    sat = saturation(img)
    if sat.size == 0 or np.ptp(sat) == 0:
        return np.zeros(sat.shape, dtype=bool)
    mask = sat > threshold_otsu(sat)
    if params.radius > 0:
        fp = disk(params.radius)
        mask = binary_closing(mask, fp)
        mask = binary_opening(mask, fp)
    if params.min_hole_area > 0:
        mask = remove_small_holes(mask, params.min_hole_area)
    return mask


def downscale_input(img: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool an H x W x C image with window = stride = ``factor``."""
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"factor must be a power of two, got {factor}")
    h, w = img.shape[:2]
    if h % factor or w % factor:
        raise ValueError(f"{h}x{w} image not divisible by factor {factor}")
    out = np.array(img, dtype=np.float64 if img.dtype.kind in "iub" else img.dtype)
    # repeated 2x2 pairwise halving keeps constant inputs exact
    while factor > 1:
        a, b = out[0::2, 0::2], out[0::2, 1::2]
        c, d = out[1::2, 0::2], out[1::2, 1::2]
        out = ((a + b) + (c + d)) * 0.25
        factor //= 2
    return out


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def read_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127
