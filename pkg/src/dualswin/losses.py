"""Training losses: binary cross-entropy, soft Dice, and the weighted
dual-decoder combination. All functions build autodiff graphs, so gradients
flow back to whatever tensors the probabilities were computed from.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BCE_EPS = 1e-7
# Smoothing only guards the 0/0 case of two empty masks; it is kept small so
# hand-computable values are unaffected at 1e-6 tolerance.
DICE_SMOOTH = 1e-6


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")


def _check_shapes(y, p):
    if tuple(y.shape) != tuple(p.shape):
        raise ValueError(f"shape mismatch: targets {tuple(y.shape)} vs predictions {tuple(p.shape)}")


def bce(y, p, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy; probabilities are clamped to [eps, 1-eps]."""
    p = p if isinstance(p, Tensor) else Tensor(np.asarray(p))
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=p.dtype)
    _check_shapes(y, p)
    pc = ad.clip_pass(p, eps, 1.0 - eps)
    ll = Tensor(y) * ad.log(pc) + Tensor(1.0 - y) * ad.log(1.0 - pc)
    return -ad.mean_(ll)


def dice_loss(y, p, smooth: float = DICE_SMOOTH) -> Tensor:
    """1 - 2*sum(y*p) / (sum(y) + sum(p) + smooth)."""
    p = p if isinstance(p, Tensor) else Tensor(np.asarray(p))
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=p.dtype)
    _check_shapes(y, p)
    inter = ad.sum_(Tensor(y) * p)
    denom = ad.sum_(p) + (float(y.sum()) + smooth)
    return 1.0 - 2.0 * inter / denom


def smooth_targets(y: np.ndarray, amount: float) -> np.ndarray:
    """Optional label smoothing for binary masks: y*(1-a) + a/2."""
    if amount <= 0.0:
        return y
    return y * (1.0 - amount) + 0.5 * amount


def combined_loss(pred, y_thyroid, y_ptmc, weights: LossWeights,
                  dual_decoder: bool = True, label_smoothing: float = 0.0) -> Tensor:
    """Weighted sum of per-decoder BCE and Dice terms on sigmoid probabilities.

    ``pred`` carries [B,H,W,1] logit tensors. With ``dual_decoder=False``
    only the tumor terms apply (the single head is trained on the tumor
    target directly).
    """
    a, b = weights.alpha, weights.beta
    y_thy = smooth_targets(np.asarray(y_thyroid, dtype=np.float64), label_smoothing)
    y_pt = smooth_targets(np.asarray(y_ptmc, dtype=np.float64), label_smoothing)

    p2 = ad.sigmoid(_squeeze_channel(pred.ptmc_logits))
    ptmc_term = b * bce(y_pt, p2) + (1.0 - b) * dice_loss(y_pt, p2)
    if not dual_decoder:
        return ptmc_term
    p1 = ad.sigmoid(_squeeze_channel(pred.thyroid_logits))
    thy_term = a * bce(y_thy, p1) + (1.0 - a) * dice_loss(y_thy, p1)
    return 0.5 * (thy_term + ptmc_term)


def _squeeze_channel(logits: Tensor) -> Tensor:
    if logits.shape[-1] != 1:
        raise ValueError(f"expected single-channel logits, got {logits.shape}")
    return ad.reshape(logits, logits.shape[:-1])
