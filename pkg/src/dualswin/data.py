"""Dataset ingestion and splitting.

On-disk layout: ``root/images``, ``root/masks_thyroid``, ``root/masks_ptmc``
holding 8-bit grayscale PNG (or PGM) files matched by filename. Images are
normalized to [0, 1] and resized bilinearly; masks are binarized at half
their max value and resized with nearest-neighbor so they stay binary.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .nn import rng_for, STREAM_SHUFFLE


class DatasetError(ValueError):
    pass


@dataclass
class SegmentationSample:
    image: np.ndarray        # float32 [H,W] in [0,1]
    thyroid_mask: np.ndarray  # uint8 [H,W] in {0,1}
    ptmc_mask: np.ndarray     # uint8 [H,W] in {0,1}
    id: str


@dataclass
class DatasetSplit:
    train: list[int]
    val: list[int]
    test: list[int]


IMAGE_DIR = "images"
THYROID_DIR = "masks_thyroid"
PTMC_DIR = "masks_ptmc"
_EXTENSIONS = (".png", ".pgm")


def _to_gray(path) -> tuple[np.ndarray, float]:
    """Returns (array, full-scale value of the source dtype)."""
    img = Image.open(path)
    arr = np.asarray(img)
    scale = float(np.iinfo(arr.dtype).max) if arr.dtype.kind in "iu" else float(max(arr.max(), 1.0))
    if arr.ndim == 3:
        warnings.warn(f"{path}: non-grayscale image, collapsing channels by mean")
        arr = arr.mean(axis=-1)
    return arr.astype(np.float64), scale


def _resize(arr: np.ndarray, size: int, nearest: bool) -> np.ndarray:
    if arr.shape == (size, size):
        return arr
    img = Image.fromarray(arr.astype(np.float32), mode="F")
    resample = Image.NEAREST if nearest else Image.BILINEAR
    return np.asarray(img.resize((size, size), resample), dtype=np.float64)


def _load_mask(path, size: int) -> np.ndarray:
    arr, _ = _to_gray(path)
    peak = arr.max()
    binary = (arr >= 0.5 * peak) if peak > 0 else np.zeros_like(arr, dtype=bool)
    out = _resize(binary.astype(np.float64), size, nearest=True)
    return (out > 0.5).astype(np.uint8)


def load_dataset(root, img_size: int) -> list[SegmentationSample]:
    """Load image/mask triples sorted by id. Raises DatasetError when a mask
    counterpart is missing."""
    img_dir = os.path.join(root, IMAGE_DIR)
    if not os.path.isdir(img_dir):
        raise DatasetError(f"missing image directory {img_dir}")
    names = sorted(n for n in os.listdir(img_dir) if n.lower().endswith(_EXTENSIONS))
    if not names:
        raise DatasetError(f"no image files under {img_dir}")
    samples = []
    for name in names:
        sid = os.path.splitext(name)[0]
        thy_path = _find_mask(root, THYROID_DIR, sid)
        ptmc_path = _find_mask(root, PTMC_DIR, sid)
        if thy_path is None or ptmc_path is None:
            which = THYROID_DIR if thy_path is None else PTMC_DIR
            raise DatasetError(f"sample {sid!r}: missing {which} mask file")
        raw, scale = _to_gray(os.path.join(img_dir, name))
        image = _resize(raw / scale, img_size, nearest=False)
        samples.append(SegmentationSample(
            image=np.clip(image, 0.0, 1.0).astype(np.float32),
            thyroid_mask=_load_mask(thy_path, img_size),
            ptmc_mask=_load_mask(ptmc_path, img_size),
            id=sid,
        ))
    return samples


def _find_mask(root, sub, sid):
    for ext in _EXTENSIONS:
        path = os.path.join(root, sub, sid + ext)
        if os.path.exists(path):
            return path
    return None


def split(samples, fractions, seed: int) -> DatasetSplit:
    """Deterministic shuffled split; val/test sizes floor, remainder to train."""
    n = len(samples)
    if n < 3:
        raise DatasetError(f"need at least 3 samples to split, got {n}")
    f_train, f_val, f_test = fractions
    n_val = int(n * f_val)
    n_test = int(n * f_test)
    order = rng_for(seed, STREAM_SHUFFLE).permutation(n)
    n_train = n - n_val - n_test
    return DatasetSplit(
        train=sorted(int(i) for i in order[:n_train]),
        val=sorted(int(i) for i in order[n_train:n_train + n_val]),
        test=sorted(int(i) for i in order[n_train + n_val:]),
    )


def augment(sample: SegmentationSample, ops, rng: np.random.Generator) -> SegmentationSample:
    """Apply augmentation ops; geometric ops hit image and both masks alike,
    intensity ops touch only the image."""
    image = sample.image
    thy = sample.thyroid_mask
    ptmc = sample.ptmc_mask
    for op in ops:
        if op == "hflip":
            if rng.random() < 0.5:
                image = image[:, ::-1].copy()
                thy = thy[:, ::-1].copy()
                ptmc = ptmc[:, ::-1].copy()
        elif op == "intensity_jitter":
            gain = 1.0 + rng.uniform(-0.15, 0.15)
            offset = rng.uniform(-0.05, 0.05)
            image = np.clip(image * gain + offset, 0.0, 1.0).astype(np.float32)
        else:
            raise ValueError(f"unknown augmentation op {op!r}")
    return SegmentationSample(image=image, thyroid_mask=thy, ptmc_mask=ptmc, id=sample.id)


def hflip(sample: SegmentationSample) -> SegmentationSample:
    """Unconditional horizontal flip (the deterministic core of the hflip op)."""
    return SegmentationSample(
        image=sample.image[:, ::-1].copy(),
        thyroid_mask=sample.thyroid_mask[:, ::-1].copy(),
        ptmc_mask=sample.ptmc_mask[:, ::-1].copy(),
        id=sample.id,
    )
