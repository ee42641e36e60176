"""Shared test oracles, independent of the library's gradient path."""

import numpy as np


def numerical_grad(f, x, eps=1e-3):
    """Central finite differences of a scalar function wrt ndarray x.

    ``f`` takes no arguments and reads ``x``, which is perturbed in place and
    restored. Returns an array of x's shape.
    """
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        f_hi = f()
        x[idx] = orig - eps
        f_lo = f()
        x[idx] = orig
        g[idx] = (f_hi - f_lo) / (2 * eps)
    return g


def numerical_grad_at(f, x, idx, eps=1e-3):
    """Central difference for a single element of x."""
    orig = x[idx]
    x[idx] = orig + eps
    f_hi = f()
    x[idx] = orig - eps
    f_lo = f()
    x[idx] = orig
    return (f_hi - f_lo) / (2 * eps)


def rel_err(a, b):
    """Max absolute difference normalized by the oracle's max magnitude."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / denom)


def brute_force_window_attention(q, k, v, num_heads, labels_per_window=None,
                                 bias=None, w_out=None, b_out=None):
    """Reference attention: explicit loops over windows, heads and tokens.

    q, k, v: [N, T, C] numpy arrays. ``labels_per_window`` is an optional
    [n_windows, T] integer array; token pairs with different labels are
    excluded from attention entirely (rather than additively masked). When
    given, N must be a multiple of n_windows with batch varying slowest.
    """
    n, t, c = q.shape
    d = c // num_heads
    out = np.zeros_like(q)
    for wi in range(n):
        if labels_per_window is not None:
            labels = labels_per_window[wi % labels_per_window.shape[0]]
        else:
            labels = np.zeros(t, dtype=int)
        for h in range(num_heads):
            qs = q[wi, :, h * d:(h + 1) * d]
            ks = k[wi, :, h * d:(h + 1) * d]
            vs = v[wi, :, h * d:(h + 1) * d]
            for i in range(t):
                allowed = np.nonzero(labels == labels[i])[0]
                logits = np.array([
                    qs[i] @ ks[j] / np.sqrt(d) + (bias[h, i, j] if bias is not None else 0.0)
                    for j in allowed
                ])
                weights = np.exp(logits - logits.max())
                weights /= weights.sum()
                out[wi, i, h * d:(h + 1) * d] = weights @ vs[allowed]
    if w_out is not None:
        out = out @ w_out + (b_out if b_out is not None else 0.0)
    return out
