"""Tensor-level building blocks for windowed attention models.

Feature grids are rank-4 tensors [batch, height, width, channels]; window
sets are rank-3 tensors [batch * num_windows, window_size**2, channels] with
batch varying slowest. All functions accept and return ``autodiff.Tensor``,
so forward passes recorded under grad mode are differentiable end to end.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MASK_FILL = -1e9  # additive mask value; large but finite so gradients stay finite
SQRT2 = float(np.sqrt(2.0))


class ShapeError(ValueError):
    pass


# -- parameter storage --------------------------------------------------------


class ParameterStore:
    """Flat registry of named parameter tensors (insertion-ordered)."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.ascontiguousarray(data), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return self._params.values()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def count(self) -> int:
        return int(sum(t.size for t in self._params.values()))

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]):
        """Overwrite parameter values; names and shapes must match exactly."""
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ValueError(
                f"parameter name mismatch: missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}"
            )
        for name, t in self._params.items():
            arr = arrays[name]
            if tuple(arr.shape) != tuple(t.shape):
                raise ValueError(f"shape mismatch for {name}: got {arr.shape}, want {t.shape}")
            t.data = np.array(arr, dtype=t.dtype)


# -- initialization -----------------------------------------------------------


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


def zeros(shape, dtype=np.float32) -> np.ndarray:
    return np.zeros(shape, dtype=dtype)


def ones(shape, dtype=np.float32) -> np.ndarray:
    return np.ones(shape, dtype=dtype)


def rng_for(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based RNG stream: fully determined by (seed, *stream)."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF] + [int(s) & 0xFFFFFFFF for s in stream])


# stream ids for rng_for
STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_AUGMENT = 3
STREAM_SYNTH = 4
STREAM_DROPOUT = 5
STREAM_BENCH = 6


# -- primitives ---------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b over the trailing axis."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    out = ad.matmul(x, w)
    if b is not None:
        out = out + b
    return out


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel (last) axis, then apply channelwise affine."""
    mu = ad.mean_(x, axis=-1, keepdims=True)
    centered = x - mu
    var = ad.mean_(centered * centered, axis=-1, keepdims=True)
    normed = centered * ad.pow_(var + eps, -0.5)
    return normed * scale + shift


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error-function form: x * Phi(x)."""
    return 0.5 * x * (1.0 + ad.erf(x * (1.0 / SQRT2)))


def mlp_gelu(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return linear(gelu(linear(x, w1, b1)), w2, b2)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; exact pass-through at rate 0 or without an rng."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    return x * Tensor(keep * (1.0 / (1.0 - rate)))


def window_partition(x: Tensor, window: int) -> Tensor:
    """[B,H,W,C] -> [B*nH*nW, window*window, C], row-major windows and tokens."""
    b, h, w, c = x.shape
    if h % window or w % window:
        raise ShapeError(f"window_partition: {h}x{w} not divisible by window {window}")
    nh, nw = h // window, w // window
    x = ad.reshape(x, (b, nh, window, nw, window, c))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (b * nh * nw, window * window, c))


def window_reverse(wins: Tensor, window: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    nh, nw = h // window, w // window
    n, t, c = wins.shape
    if t != window * window or n % (nh * nw):
        raise ShapeError(f"window_reverse: {wins.shape} does not tile {h}x{w} with window {window}")
    b = n // (nh * nw)
    x = ad.reshape(wins, (b, nh, nw, window, window, c))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (b, h, w, c))


def cyclic_shift(x: Tensor, shift: int) -> Tensor:
    """Roll both spatial axes by -shift (toroidal). Undo with -shift."""
    if shift == 0:
        return x
    return ad.roll(x, (-shift, -shift), (1, 2))


def shift_region_labels(h: int, w: int, window: int, shift: int) -> np.ndarray:
    """Label each token of the post-shift canvas by its pre-shift contiguous region."""
    labels = np.zeros((h, w), dtype=np.int64)
    if shift == 0:
        return labels
    slices = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    region = 0
    for hs in slices:
        for ws in slices:
            labels[hs, ws] = region
            region += 1
    return labels


def build_shift_mask(h: int, w: int, window: int, shift: int, dtype=np.float32) -> np.ndarray:
    """Additive attention mask [num_windows, window**2, window**2].

    Entry is 0 iff both tokens of a window come from the same pre-shift
    region, MASK_FILL otherwise. All-zero when shift is 0.
    """
    if h % window or w % window:
        raise ShapeError(f"build_shift_mask: {h}x{w} not divisible by window {window}")
    labels = shift_region_labels(h, w, window, shift)
    nh, nw = h // window, w // window
    win_labels = labels.reshape(nh, window, nw, window).transpose(0, 2, 1, 3)
    win_labels = win_labels.reshape(nh * nw, window * window)
    diff = win_labels[:, :, None] != win_labels[:, None, :]
    return np.where(diff, np.array(MASK_FILL, dtype=dtype), np.array(0.0, dtype=dtype))


def relative_position_index(window: int) -> np.ndarray:
    """[window**2, window**2] lookup into a (2*window-1)**2 bias table."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :] + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


def split_heads(x: Tensor, num_heads: int) -> Tensor:
    """[N, T, C] -> [N, heads, T, C/heads]."""
    n, t, c = x.shape
    if c % num_heads:
        raise ShapeError(f"channels {c} not divisible by {num_heads} heads")
    x = ad.reshape(x, (n, t, num_heads, c // num_heads))
    return ad.transpose(x, (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """[N, heads, T, D] -> [N, T, heads*D]."""
    n, h, t, d = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (n, t, h * d))


def window_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    num_heads: int,
    w_out: Tensor,
    b_out: Tensor | None = None,
    bias: Tensor | None = None,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Multi-head attention within windows.

    q, k, v: [B*nW, T, C] window sets. ``bias`` is a per-head additive table
    [heads, T, T]; ``mask`` is a per-window additive array [nW, T, T]
    broadcast over the batch. Heads are concatenated and projected by
    ``w_out``/``b_out``.
    """
    n, t, c = q.shape
    qh = split_heads(q, num_heads)
    kh = split_heads(k, num_heads)
    vh = split_heads(v, num_heads)
    d = c // num_heads
    attn = ad.matmul(qh * (1.0 / np.sqrt(d)), ad.transpose(kh, (0, 1, 3, 2)))
    if bias is not None:
        attn = attn + bias  # [heads,T,T] broadcasts over windows*batch
    if mask is not None:
        nw = mask.shape[0]
        if n % nw:
            raise ShapeError(f"mask for {nw} windows does not divide batch axis {n}")
        b = n // nw
        attn = ad.reshape(attn, (b, nw, num_heads, t, t))
        attn = attn + Tensor(mask[None, :, None].astype(q.dtype))
        attn = ad.reshape(attn, (n, num_heads, t, t))
    weights = ad.softmax(attn, axis=-1)
    out = merge_heads(ad.matmul(weights, vh))
    return linear(out, w_out, b_out)
