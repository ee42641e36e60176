"""Synthetic ultrasound-phantom generator.

Each sample is a dark background with a brighter elliptical gland band at a
random pose, a small hypoechoic (darker) elliptical tumor strictly inside
the gland, multiplicative speckle noise, and an occasional vertical shadow
streak. Masks are exact ellipse rasterizations at pixel centers, and the
tumor mask is a subset of the gland mask by construction. This is a visual
stand-in for clinical data, not a physical ultrasound simulator.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, asdict

import numpy as np
from PIL import Image

from .data import IMAGE_DIR, PTMC_DIR, THYROID_DIR, SegmentationSample
from .nn import rng_for, STREAM_SYNTH

# Geometry bounds, as fractions of the image size (semi-axes).
GLAND_A_RANGE = (0.26, 0.36)        # gland major semi-axis
GLAND_B_RANGE = (0.14, 0.22)        # gland minor semi-axis
GLAND_TILT_DEG = 25.0
# Tumor semi-axes relative to the gland minor semi-axis; the 1/3 cap keeps
# tumor diameter <= gland minor axis / 3.
TUMOR_AXIS_RANGE = (0.18, 1.0 / 3.0)
BACKGROUND_RANGE = (0.05, 0.12)
GLAND_INTENSITY_RANGE = (0.38, 0.55)
TUMOR_CONTRAST_RANGE = (0.30, 0.55)  # tumor intensity as a fraction of gland's
SPECKLE_SIGMA_RANGE = (0.06, 0.15)
SHADOW_PROBABILITY = 0.3

# Expected mean tumor area fraction implied by the bounds above; used by the
# generator's self-check.
TUMOR_AREA_FRACTION_BOUNDS = (0.002, 0.012)


@dataclass
class PhantomGeometry:
    gland_cx: float
    gland_cy: float
    gland_a: float
    gland_b: float
    gland_angle: float
    tumor_cx: float
    tumor_cy: float
    tumor_a: float
    tumor_b: float
    tumor_angle: float
    background: float
    gland_intensity: float
    tumor_intensity: float
    speckle_sigma: float
    shadow_center: float  # -1 when no shadow


def _ellipse_mask(size, cx, cy, a, b, angle) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    x = (xx + 0.5) - cx
    y = (yy + 0.5) - cy
    ca, sa = np.cos(angle), np.sin(angle)
    u = x * ca + y * sa
    v = -x * sa + y * ca
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def generate_sample(img_size: int, seed: int, index: int,
                    tumor_axis_range=TUMOR_AXIS_RANGE) -> tuple[SegmentationSample, PhantomGeometry]:
    rng = rng_for(seed, STREAM_SYNTH, index)
    s = float(img_size)

    gland_a = rng.uniform(*GLAND_A_RANGE) * s
    gland_b = rng.uniform(*GLAND_B_RANGE) * s
    gland_angle = np.deg2rad(rng.uniform(-GLAND_TILT_DEG, GLAND_TILT_DEG))
    gland_cx = s * rng.uniform(0.42, 0.58)
    gland_cy = s * rng.uniform(0.42, 0.58)
    gland = _ellipse_mask(img_size, gland_cx, gland_cy, gland_a, gland_b, gland_angle)

    lo, hi = tumor_axis_range
    if hi > 1.0 / 3.0 + 1e-12:
        raise ValueError("tumor semi-axes may not exceed a third of the gland minor semi-axis")
    for _ in range(200):
        tumor_a = rng.uniform(lo, hi) * gland_b
        tumor_b = rng.uniform(lo, hi) * gland_b
        tumor_angle = rng.uniform(0.0, np.pi)
        # place the center well inside the gland, then verify containment
        r = np.sqrt(rng.uniform(0.0, 1.0)) * 0.55
        phi = rng.uniform(0.0, 2 * np.pi)
        ca, sa = np.cos(gland_angle), np.sin(gland_angle)
        du, dv = r * gland_a * np.cos(phi), r * gland_b * np.sin(phi)
        tumor_cx = gland_cx + du * ca - dv * sa
        tumor_cy = gland_cy + du * sa + dv * ca
        tumor = _ellipse_mask(img_size, tumor_cx, tumor_cy, tumor_a, tumor_b, tumor_angle)
        if tumor.any() and not (tumor & ~gland).any():
            break
    else:
        raise RuntimeError(f"could not place tumor inside gland for sample {index}")

    background = rng.uniform(*BACKGROUND_RANGE)
    gland_int = rng.uniform(*GLAND_INTENSITY_RANGE)
    tumor_int = gland_int * rng.uniform(*TUMOR_CONTRAST_RANGE)
    image = np.full((img_size, img_size), background)
    image[gland] = gland_int
    image[tumor] = tumor_int

    sigma = rng.uniform(*SPECKLE_SIGMA_RANGE)
    image = image * (1.0 + sigma * rng.standard_normal(image.shape))

    shadow_center = -1.0
    if rng.random() < SHADOW_PROBABILITY:
        shadow_center = rng.uniform(0.2, 0.8) * s
        width = rng.uniform(0.04, 0.10) * s
        depth = rng.uniform(0.35, 0.65)
        cols = np.arange(img_size) + 0.5
        profile = 1.0 - (1.0 - depth) * np.exp(-0.5 * ((cols - shadow_center) / width) ** 2)
        image = image * profile[None, :]

    sample = SegmentationSample(
        image=np.clip(image, 0.0, 1.0).astype(np.float32),
        thyroid_mask=gland.astype(np.uint8),
        ptmc_mask=tumor.astype(np.uint8),
        id=f"synth_{index:05d}",
    )
    geometry = PhantomGeometry(
        gland_cx=gland_cx, gland_cy=gland_cy, gland_a=gland_a, gland_b=gland_b,
        gland_angle=float(gland_angle), tumor_cx=tumor_cx, tumor_cy=tumor_cy,
        tumor_a=tumor_a, tumor_b=tumor_b, tumor_angle=float(tumor_angle),
        background=background, gland_intensity=gland_int, tumor_intensity=tumor_int,
        speckle_sigma=sigma, shadow_center=shadow_center,
    )
    return sample, geometry


def synth_generate(n: int, img_size: int, seed: int,
                   tumor_axis_range=TUMOR_AXIS_RANGE) -> list[SegmentationSample]:
    if n < 1:
        raise ValueError("need n >= 1")
    return [generate_sample(img_size, seed, i, tumor_axis_range)[0] for i in range(n)]


def write_dataset(root, n: int, img_size: int, seed: int) -> list[SegmentationSample]:
    """Write a complete dataset tree plus a manifest of per-sample geometry."""
    for sub in (IMAGE_DIR, THYROID_DIR, PTMC_DIR):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    samples = []
    manifest_lines = []
    for i in range(n):
        sample, geom = generate_sample(img_size, seed, i)
        samples.append(sample)
        _save_png(os.path.join(root, IMAGE_DIR, sample.id + ".png"),
                  (sample.image * 255).round().astype(np.uint8))
        _save_png(os.path.join(root, THYROID_DIR, sample.id + ".png"),
                  sample.thyroid_mask * 255)
        _save_png(os.path.join(root, PTMC_DIR, sample.id + ".png"),
                  sample.ptmc_mask * 255)
        fieldstr = " ".join(f"{k}={v:.4f}" for k, v in asdict(geom).items())
        manifest_lines.append(f"{sample.id} seed={seed} index={i} {fieldstr}")
    with open(os.path.join(root, "manifest.txt"), "w") as fh:
        fh.write("\n".join(manifest_lines) + "\n")
    return samples


def _save_png(path, arr: np.ndarray):
    Image.fromarray(arr, mode="L").save(path)
