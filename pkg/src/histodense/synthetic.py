"""Synthetic H&E-like fixtures for smoke tests and demos."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

BACKGROUND = np.array([245, 245, 245])
TISSUE = np.array([230, 150, 200])  # pink
LESION = np.array([140, 70, 150])  # purple
GRADE_COLORS = {3: np.array([200, 90, 170]), 4: np.array([150, 50, 150]), 5: np.array([90, 20, 110])}


def _disk(h, w, cy, cx, r):
    yy, xx = np.mgrid[:h, :w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _tissue(rng, h, w):
    # a large ellipse of tissue on white background
    yy, xx = np.mgrid[:h, :w]
    cy, cx = h / 2 + rng.uniform(-h / 10, h / 10), w / 2 + rng.uniform(-w / 10, w / 10)
    ry, rx = h * rng.uniform(0.36, 0.44), w * rng.uniform(0.36, 0.44)
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1


def _paint(rng, mask_layers, h, w):
    img = np.broadcast_to(BACKGROUND, (h, w, 3)).astype(np.float64).copy()
    for mask, color in mask_layers:
        img[mask] = color
    img += rng.normal(0, 4, img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def make_blob_dataset(root: str | Path, n_images: int = 16, size: int = 256,
                      n_negative: int = 4, seed: int = 0) -> Path:
    """Binary dataset: tissue ellipses, some with dark lesion blobs (class 1)."""
    root = Path(root)
    for d in ("images", "labels/p1"):
        (root / d).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(n_images):
        tissue = _tissue(rng, size, size)
        label = np.zeros((size, size), np.uint8)
        if i >= n_negative:
            for _ in range(rng.integers(1, 4)):
                pts = np.argwhere(tissue)
                cy, cx = pts[rng.integers(len(pts))]
                label |= (_disk(size, size, cy, cx, rng.uniform(size / 14, size / 7)) & tissue)
        img = _paint(rng, [(tissue, TISSUE), (label.astype(bool), LESION)], size, size)
        Image.fromarray(img).save(root / "images" / f"img{i:03d}.png")
        Image.fromarray(label * 255).save(root / "labels" / "p1" / f"img{i:03d}.png")
    return root


def make_gleason_dataset(root: str | Path, n_images: int = 8, size: int = 128,
                         annotators: int = 3, seed: int = 0) -> Path:
    """Multi-annotator Gleason-like dataset with raw grades 0..5.

    Every image carries regions of grades 3, 4 and 5; annotators disagree by
    relabelling whole regions and by occasionally marking grades 1-2 or
    labelling outside the tissue.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = [f"p{j + 1}" for j in range(annotators)]
    for n in names:
        (root / "labels" / n).mkdir(parents=True, exist_ok=True)
    for i in range(n_images):
        tissue = _tissue(rng, size, size)
        regions = []
        for grade in (3, 4, 5):
            pts = np.argwhere(tissue)
            cy, cx = pts[rng.integers(len(pts))]
            regions.append((_disk(size, size, cy, cx, size / 8) & tissue, grade))
        img = _paint(rng, [(tissue, TISSUE)] + [(m, GRADE_COLORS[g]) for m, g in regions], size, size)
        Image.fromarray(img).save(root / "images" / f"core{i:03d}.png")
        for j, n in enumerate(names):
            if j > 0 and rng.random() < 0.2:
                continue  # not every pathologist annotated every image
            lab = np.zeros((size, size), np.uint8)
            for m, g in regions:
                lab[m] = g if rng.random() > 0.25 else int(rng.choice([1, 2, 3, 4, 5]))
            # stray label outside tissue
            lab[:4, :4] = 4
            Image.fromarray(lab).save(root / "labels" / n / f"core{i:03d}.png")
    return root
