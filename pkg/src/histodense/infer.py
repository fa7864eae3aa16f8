"""Tiled whole-image prediction with weighted stitching."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from PIL import Image
from skimage.segmentation import find_boundaries

from .labels import argmax_high_tie


@dataclass(frozen=True)
class TilePlan:
    image_size: tuple[int, int]
    tile_side: int
    overlap: int
    origins: tuple[tuple[int, int], ...]
    padding: tuple[int, int]  # reflect padding added at the bottom and right

    @property
    def stride(self) -> int:
        return self.tile_side - self.overlap

    @property
    def canvas_size(self) -> tuple[int, int]:
        return (self.image_size[0] + self.padding[0], self.image_size[1] + self.padding[1])


def _axis_origins(size: int, tile: int, stride: int) -> list[int]:
    last = size - tile
    out = list(range(0, last + 1, stride))
    if out[-1] != last:
        out.append(last)
    return out


def plan_tiles(image_size: tuple[int, int], tile_side: int, overlap: int,
               downsampling_factor: int = 1) -> TilePlan:
    h, w = image_size
    if tile_side < 1 or tile_side % downsampling_factor:
        raise ValueError(f"tile side {tile_side} not divisible by {downsampling_factor}")
    if not 0 <= overlap < tile_side:
        raise ValueError(f"overlap must satisfy 0 <= overlap < tile side, got {overlap}")
    if h < 1 or w < 1:
        raise ValueError(f"empty image {image_size}")
    pad = (max(0, tile_side - h), max(0, tile_side - w))
    stride = tile_side - overlap
    rows = _axis_origins(h + pad[0], tile_side, stride)
    cols = _axis_origins(w + pad[1], tile_side, stride)
    origins = tuple((r, c) for r in rows for c in cols)
    return TilePlan((h, w), tile_side, overlap, origins, pad)


def _ramp(n: int, overlap: int, ramp_start: bool, ramp_end: bool) -> np.ndarray:
    w = np.ones(n)
    if overlap <= 0:
        return w
    t = 0.5 - 0.5 * np.cos(np.pi * (np.arange(overlap) + 0.5) / overlap)
    if ramp_start:
        w[:overlap] = t
    if ramp_end:
        w[n - overlap:] = np.minimum(w[n - overlap:], t[::-1])
    return w


def tile_window(plan: TilePlan, origin: tuple[int, int], mode: str = "cosine") -> np.ndarray:
    """Separable per-tile weight; only sides shared with a neighbour taper."""
    t = plan.tile_side
    if mode == "uniform" or plan.overlap == 0:
        return np.ones((t, t))
    if mode != "cosine":
        raise ValueError(f"unknown window {mode!r}")
    ch, cw = plan.canvas_size
    r, c = origin
    wr = _ramp(t, plan.overlap, r > 0, r + t < ch)
    wc = _ramp(t, plan.overlap, c > 0, c + t < cw)
    return np.outer(wr, wc)


@dataclass
class StitchedPrediction:
    probs: np.ndarray  # H x W x K
    weight: np.ndarray  # H x W


def _net_tile_side(net) -> int | None:
    cfg = getattr(net, "config", None)
    return getattr(cfg, "patch_side", None)


def predict_image(
    net: Callable[[torch.Tensor], torch.Tensor],
    image: np.ndarray,
    plan: TilePlan,
    window: str = "cosine",
    batch_size: int = 1,
) -> StitchedPrediction:
    """Run ``net`` on every tile and blend the softmax outputs.

    ``net`` maps an N x C x T x T tensor to N x K x T x T probabilities.
    Accumulation order follows tile index order.
    """
    side = _net_tile_side(net)
    if side is not None and side != plan.tile_side:
        raise ValueError(f"network patch side {side} != tile side {plan.tile_side}")
    if tuple(image.shape[:2]) != tuple(plan.image_size):
        raise ValueError(f"image {image.shape[:2]} does not match plan {plan.image_size}")
    ph, pw = plan.padding
    canvas = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="reflect") if (ph or pw) else image
    t = plan.tile_side

    was_training = getattr(net, "training", False)
    if hasattr(net, "eval"):
        net.eval()
    params = list(net.parameters()) if hasattr(net, "parameters") else []
    if params:
        dtype = params[0].dtype
    else:
        dtype = torch.float64 if canvas.dtype == np.float64 else torch.float32

    acc = None
    weight = np.zeros(plan.canvas_size)
    try:
        with torch.no_grad():
            for start in range(0, len(plan.origins), batch_size):
                group = plan.origins[start:start + batch_size]
                x = np.stack([canvas[r:r + t, c:c + t] for r, c in group])
                x = torch.as_tensor(x, dtype=dtype).permute(0, 3, 1, 2)
                y = net(x).permute(0, 2, 3, 1).double().cpu().numpy()
                if acc is None:
                    acc = np.zeros(plan.canvas_size + (y.shape[-1],))
                for (r, c), out in zip(group, y):
                    w = tile_window(plan, (r, c), window)
                    acc[r:r + t, c:c + t] += out * w[..., None]
                    weight[r:r + t, c:c + t] += w
    finally:
        if was_training:
            net.train()
    h, w = plan.image_size
    probs = acc[:h, :w] / weight[:h, :w, None]
    return StitchedPrediction(probs, weight[:h, :w])


@dataclass
class Decoded:
    classes: np.ndarray
    foreground: np.ndarray | None = None


def decode(pred: StitchedPrediction | np.ndarray, task: str = "gleason") -> Decoded:
    probs = pred.probs if isinstance(pred, StitchedPrediction) else np.asarray(pred)
    classes = argmax_high_tie(probs)
    fg = probs[..., 1].copy() if task == "digestpath" else None
    return Decoded(classes, fg)


CLASS_COLORS = np.array([
    [0, 0, 0], [0, 200, 0], [255, 200, 0], [220, 0, 0], [0, 0, 255], [200, 0, 200]
], dtype=np.uint8)


def write_prediction(out_dir: str | Path, image_id: str, pred: StitchedPrediction,
                     decoded: Decoded) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for k in range(pred.probs.shape[-1]):
        p = out / f"{image_id}_prob{k}.png"
        Image.fromarray(np.round(255 * np.clip(pred.probs[..., k], 0, 1)).astype(np.uint8), "L").save(p)
        written.append(p)
    p = out / f"{image_id}_classes.png"
    Image.fromarray(decoded.classes.astype(np.uint8), "L").save(p)
    written.append(p)
    return written


def render_overlay(rgb: np.ndarray, classes: np.ndarray) -> np.ndarray:
    """Input image with class-coloured contours drawn on top."""
    img = np.asarray(rgb)
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    out = img.copy()
    for k in np.unique(classes):
        if k == 0:
            continue
        edge = find_boundaries(classes == k, mode="inner")
        out[edge] = CLASS_COLORS[int(k) % len(CLASS_COLORS)]
    return out
