"""Composite stage blocks: patch embedding, W-MSA/SW-MSA block pairs, patch
merging/expanding, and the final x4 expansion back to pixel resolution.

Each layer registers its parameters into a shared :class:`ParameterStore`
under a dotted prefix at construction time, so checkpointing and gradient
bookkeeping see one flat namespace.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .nn import ParameterStore, ShapeError


class Linear:
    def __init__(self, store, prefix, d_in, d_out, rng, dtype, bias=True):
        self.w = store.add(f"{prefix}.weight", nn.trunc_normal(rng, (d_in, d_out), dtype=dtype))
        self.b = store.add(f"{prefix}.bias", nn.zeros(d_out, dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return nn.linear(x, self.w, self.b)


class LayerNorm:
    def __init__(self, store, prefix, dim, dtype, eps=1e-5):
        self.scale = store.add(f"{prefix}.scale", nn.ones(dim, dtype))
        self.shift = store.add(f"{prefix}.shift", nn.zeros(dim, dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return nn.layer_norm(x, self.scale, self.shift, self.eps)


class PatchEmbed:
    """Tile the image into non-overlapping patches and project each flattened
    patch (patch**2 * in_channels values) to the embedding width."""

    def __init__(self, store, prefix, patch_size, in_channels, embed_dim, rng, dtype):
        self.patch = patch_size
        self.in_channels = in_channels
        self.proj = Linear(store, f"{prefix}.proj", patch_size * patch_size * in_channels,
                           embed_dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        p = self.patch
        if c != self.in_channels:
            raise ShapeError(f"patch_embed: expected {self.in_channels} channels, got {c}")
        if h % p or w % p:
            raise ShapeError(f"patch_embed: {h}x{w} not divisible by patch size {p}")
        x = ad.reshape(x, (b, h // p, p, w // p, p, c))
        x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
        x = ad.reshape(x, (b, h // p, w // p, p * p * c))
        return self.proj(x)


class WindowAttentionLayer:
    """QKV projection + masked multi-head window attention + output projection."""

    def __init__(self, store, prefix, dim, num_heads, window, rng, dtype, rel_bias=True):
        self.dim = dim
        self.num_heads = num_heads
        self.window = window
        self.qkv = Linear(store, f"{prefix}.qkv", dim, 3 * dim, rng, dtype)
        self.proj = Linear(store, f"{prefix}.proj", dim, dim, rng, dtype)
        if rel_bias:
            table = nn.trunc_normal(rng, ((2 * window - 1) ** 2, num_heads), dtype=dtype)
            self.bias_table = store.add(f"{prefix}.rel_bias", table)
            self.bias_index = nn.relative_position_index(window)
        else:
            self.bias_table = None
            self.bias_index = None

    def __call__(self, windows: Tensor, mask: np.ndarray | None) -> Tensor:
        c = windows.shape[-1]
        qkv = self.qkv(windows)
        q = qkv[..., 0:c]
        k = qkv[..., c:2 * c]
        v = qkv[..., 2 * c:3 * c]
        bias = None
        if self.bias_table is not None:
            # [T,T,heads] -> [heads,T,T]
            bias = ad.transpose(ad.gather_rows(self.bias_table, self.bias_index), (2, 0, 1))
        return nn.window_attention(q, k, v, self.num_heads, self.proj.w, self.proj.b,
                                   bias=bias, mask=mask)


class SwinBlock:
    """One attention sub-block (W-MSA or SW-MSA) plus its MLP, pre-norm with
    residual connections. ``shift=0`` gives the plain windowed variant."""

    def __init__(self, store, prefix, h, w, dim, num_heads, window, shift, mlp_ratio,
                 drop_rate, rng, dtype, rel_bias=True):
        self.h, self.w = h, w
        self.window = window
        self.shift = shift
        self.drop_rate = drop_rate
        self.norm1 = LayerNorm(store, f"{prefix}.norm1", dim, dtype)
        self.attn = WindowAttentionLayer(store, f"{prefix}.attn", dim, num_heads, window,
                                         rng, dtype, rel_bias)
        self.norm2 = LayerNorm(store, f"{prefix}.norm2", dim, dtype)
        hidden = int(dim * mlp_ratio)
        self.mlp_fc1 = Linear(store, f"{prefix}.mlp.fc1", dim, hidden, rng, dtype)
        self.mlp_fc2 = Linear(store, f"{prefix}.mlp.fc2", hidden, dim, rng, dtype)
        self.mask = nn.build_shift_mask(h, w, window, shift, dtype) if shift else None

    def __call__(self, x: Tensor, drop_rng=None) -> Tensor:
        b, h, w, c = x.shape
        if (h, w) != (self.h, self.w):
            raise ShapeError(f"block built for {self.h}x{self.w}, got {h}x{w}")
        shortcut = x
        y = self.norm1(x)
        y = nn.cyclic_shift(y, self.shift)
        wins = nn.window_partition(y, self.window)
        wins = self.attn(wins, self.mask)
        y = nn.window_reverse(wins, self.window, h, w)
        if self.shift:
            y = ad.roll(y, (self.shift, self.shift), (1, 2))
        y = nn.dropout(y, self.drop_rate, drop_rng)
        x = shortcut + y
        m = self.mlp_fc2(nn.gelu(self.mlp_fc1(self.norm2(x))))
        m = nn.dropout(m, self.drop_rate, drop_rng)
        return x + m


class SwinBlockPair:
    """Two successive sub-blocks: windowed attention then shifted-window
    attention (shift = window // 2). Shape-preserving."""

    def __init__(self, store, prefix, h, w, dim, num_heads, window, mlp_ratio,
                 drop_rate, rng, dtype, rel_bias=True):
        self.wmsa = SwinBlock(store, f"{prefix}.wmsa", h, w, dim, num_heads, window, 0,
                              mlp_ratio, drop_rate, rng, dtype, rel_bias)
        self.swmsa = SwinBlock(store, f"{prefix}.swmsa", h, w, dim, num_heads, window,
                               window // 2, mlp_ratio, drop_rate, rng, dtype, rel_bias)

    def __call__(self, x: Tensor, drop_rng=None) -> Tensor:
        return self.swmsa(self.wmsa(x, drop_rng), drop_rng)


# 2x2 neighborhood order used by merge, inverted by expand: channel blocks are
# stacked as (row_offset, col_offset) = (0,0), (1,0), (0,1), (1,1).


def merge_neighborhoods(x: Tensor) -> Tensor:
    """[B,H,W,C] -> [B,H/2,W/2,4C] concatenation of each 2x2 neighborhood."""
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"merge requires even spatial dims, got {h}x{w}")
    x = ad.reshape(x, (b, h // 2, 2, w // 2, 2, c))
    x = ad.transpose(x, (0, 1, 3, 4, 2, 5))  # [B,H2,W2,dx,dy,C]
    return ad.reshape(x, (b, h // 2, w // 2, 4 * c))


def expand_neighborhoods(x: Tensor, factor: int = 2) -> Tensor:
    """[B,H,W,f*f*C'] -> [B,f*H,f*W,C'], the structural inverse of
    :func:`merge_neighborhoods` for factor 2."""
    b, h, w, c = x.shape
    if c % (factor * factor):
        raise ShapeError(f"expand: channels {c} not divisible by {factor * factor}")
    cf = c // (factor * factor)
    x = ad.reshape(x, (b, h, w, factor, factor, cf))  # [..., dx, dy, C']
    x = ad.transpose(x, (0, 1, 4, 2, 3, 5))  # [B,H,dy,W,dx,C']
    return ad.reshape(x, (b, h * factor, w * factor, cf))


class PatchMerge:
    """Downsample: 2x2 concat -> layer norm over 4C -> linear 4C -> 2C."""

    def __init__(self, store, prefix, dim, rng, dtype, use_norm=True):
        self.norm = LayerNorm(store, f"{prefix}.norm", 4 * dim, dtype) if use_norm else None
        self.reduce = Linear(store, f"{prefix}.reduce", 4 * dim, 2 * dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        y = merge_neighborhoods(x)
        if self.norm is not None:
            y = self.norm(y)
        return self.reduce(y)


class PatchExpand:
    """Upsample: linear C -> 2C -> rearrange to 2x2 blocks of C/2 -> layer norm."""

    def __init__(self, store, prefix, dim, rng, dtype, use_norm=True):
        if dim % 2:
            raise ShapeError(f"patch_expand requires even channels, got {dim}")
        self.grow = Linear(store, f"{prefix}.grow", dim, 2 * dim, rng, dtype)
        self.norm = LayerNorm(store, f"{prefix}.norm", dim // 2, dtype) if use_norm else None

    def __call__(self, x: Tensor) -> Tensor:
        y = expand_neighborhoods(self.grow(x), 2)
        if self.norm is not None:
            y = self.norm(y)
        return y


class FinalExpand:
    """Patch-factor spatial upsample keeping the channel count: linear
    C -> factor**2 * C, then rearrange into factor x factor spatial blocks of
    C channels (factor 4 restores pixel resolution for 4x4 patches)."""

    def __init__(self, store, prefix, dim, rng, dtype, factor=4):
        self.factor = factor
        self.grow = Linear(store, f"{prefix}.grow", dim, factor * factor * dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return expand_neighborhoods(self.grow(x), self.factor)
