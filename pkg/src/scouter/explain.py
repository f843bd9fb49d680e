"""Attention rows -> input-resolution heatmaps, and rendering them to disk."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, UsageError
from .pnm import write_pnm

OVERLAY_ALPHA = 0.6
RENDER_MODES = ("raw", "overlay")


def resize_weights(src: int, dst: int) -> np.ndarray:
    """``dst x src`` interpolation matrix, half-pixel centers, edge-clamped."""
    if dst < 1 or src < 1:
        raise DimensionError(f"resize dims must be >= 1, got {src} -> {dst}")
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0, src - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    m = np.zeros((dst, src))
    rows = np.arange(dst)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_resize(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise DimensionError(f"bilinear_resize expects a 2-d grid, got shape {grid.shape}")
    if height < 1 or width < 1:
        raise DimensionError(f"target size must be positive, got {height}x{width}")
    return resize_weights(grid.shape[0], height) @ grid @ resize_weights(grid.shape[1], width).T


@dataclass
class Heatmap:
    values: np.ndarray  # H x W, in [0, 1]
    class_index: int
    e: int = 1

    @property
    def shape(self):
        return self.values.shape


def heatmap_from_attention(attention_row: np.ndarray, spatial, size, class_index: int, e: int = 1) -> Heatmap:
    h, w = spatial
    grid = np.asarray(attention_row, dtype=np.float64).reshape(h, w)
    vals = np.clip(bilinear_resize(grid, *size), 0.0, 1.0)
    return Heatmap(vals, int(class_index), int(e))


def extract_heatmap(model, image: np.ndarray, class_index: int) -> Heatmap:
    """Heatmap for one class from a trained scouter model; ``image`` is ``c x H x W`` standardized."""
    n = model.config.n_classes
    if not 0 <= class_index < n:
        raise IndexError(f"class index {class_index} out of range for {n} classes")
    if not model.is_scouter:
        raise UsageError("heatmaps need a scouter-head model")
    attn = model.attention(np.asarray(image)[None])[0]  # n x h x w
    h, w = attn.shape[1:]
    return heatmap_from_attention(attn[class_index], (h, w), image.shape[-2:], class_index, model.config.xslot.e)


def explainer(model, class_index: int):
    """Image -> flattened heatmap callable, for the sensitivity metric."""

    def fn(image: np.ndarray) -> np.ndarray:
        return extract_heatmap(model, image, class_index).values

    return fn


def overlay(values: np.ndarray, image: np.ndarray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Blend ``image`` (c x H x W in [0, 1]) toward pure red by ``alpha * values``; returns uint8 3 x H x W."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    a = alpha * np.asarray(values, dtype=np.float64)[None]
    red = np.array([1.0, 0.0, 0.0])[:, None, None]
    out = (1 - a) * img + a * red
    return np.round(np.clip(out, 0, 1) * 255).astype(np.uint8)


def render(heatmap: Heatmap, image: np.ndarray, out_path, mode: str = "raw") -> None:
    """Write the heatmap as an 8-bit PGM (``raw``) or as a PPM overlay on ``image`` (``overlay``).

    ``image`` is the display image in [0, 1], ``c x H x W``.
    """
    if mode not in RENDER_MODES:
        raise ValueError(f"mode must be one of {RENDER_MODES}")
    img = np.asarray(image)
    if img.shape[-2:] != heatmap.values.shape:
        raise DimensionError(f"heatmap {heatmap.values.shape} and image {img.shape} differ in size")
    if mode == "raw":
        write_pnm(out_path, np.round(255 * np.clip(heatmap.values, 0, 1)).astype(np.uint8))
    else:
        write_pnm(out_path, overlay(heatmap.values, img))
