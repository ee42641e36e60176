"""Overlay and heatmap rendering.

Overlays color every pixel by its confusion class: true positives white,
false negatives pink, false positives green, everything else the grayscale
image value. Heatmaps Gaussian-blur a probability map, min-max normalize,
map it through a fixed black-red-yellow-white ("hot") ramp and alpha-blend
it over the image.
"""

from __future__ import annotations

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

WHITE = (255, 255, 255)
PINK = (255, 105, 180)
GREEN = (0, 255, 0)
HEATMAP_ALPHA = 0.5


def render_overlay(gt, pred, image) -> np.ndarray:
    """RGB uint8 overlay of prediction vs ground truth over a [0,1] image."""
    gt = np.asarray(gt) > 0.5
    pred = np.asarray(pred) > 0.5
    image = np.asarray(image, dtype=np.float64)
    if gt.shape != pred.shape or gt.shape != image.shape:
        raise ValueError(
            f"shape mismatch: gt {gt.shape}, pred {pred.shape}, image {image.shape}"
        )
    # cap background gray at 254 so the pure marker colors stay unambiguous
    gray = np.clip(np.round(image * 255.0), 0, 254).astype(np.uint8)
    out = np.repeat(gray[..., None], 3, axis=-1)
    out[gt & pred] = WHITE
    out[gt & ~pred] = PINK
    out[~gt & pred] = GREEN
    return out


def hot_colormap(t: np.ndarray) -> np.ndarray:
    """Fixed ramp 0..1 -> RGB floats: black -> red -> yellow -> white."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    r = np.clip(3.0 * t, 0.0, 1.0)
    g = np.clip(3.0 * t - 1.0, 0.0, 1.0)
    b = np.clip(3.0 * t - 2.0, 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def blur(prob: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur with reflective boundaries; identity at sigma 0."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return np.asarray(prob, dtype=np.float64)
    return gaussian_filter(np.asarray(prob, dtype=np.float64), sigma, mode="reflect")


def render_heatmap(prob, sigma: float, image, alpha: float = HEATMAP_ALPHA):
    """Returns (rgb uint8, note). A note is set (and the plain grayscale image
    returned) when the prediction is identically zero."""
    prob = np.asarray(prob, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    if prob.shape != image.shape:
        raise ValueError(f"shape mismatch: prob {prob.shape}, image {image.shape}")
    gray = np.clip(image * 255.0, 0, 255).astype(np.uint8)
    base = np.repeat(gray[..., None], 3, axis=-1)
    if not prob.any():
        return base, "prediction is identically zero; no heatmap rendered"
    smooth = blur(prob, sigma)
    lo, hi = smooth.min(), smooth.max()
    normed = (smooth - lo) / (hi - lo) if hi > lo else np.zeros_like(smooth)
    colors = hot_colormap(normed) * 255.0
    blended = (1.0 - alpha) * base + alpha * colors
    return np.clip(blended, 0, 255).round().astype(np.uint8), None


def save_image(path, arr: np.ndarray):
    if arr.ndim == 2:
        Image.fromarray(arr, mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)
