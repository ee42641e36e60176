import mpmath
import numpy as np
import pytest

from dualswin import autodiff as ad
from dualswin import nn
from dualswin.autodiff import Tensor
from dualswin.nn import ShapeError

from helpers import brute_force_window_attention, numerical_grad, rel_err

RNG = np.random.default_rng(99)


# -- linear -------------------------------------------------------------------

def test_linear_identity():
    out = nn.linear(Tensor(np.array([[1.0, 2.0]])), Tensor(np.eye(2)), Tensor(np.zeros(2)))
    assert np.allclose(out.data, [[1.0, 2.0]])


def test_linear_hand_value():
    out = nn.linear(Tensor(np.array([[1.0, 1.0]])), Tensor(np.array([[2.0], [3.0]])),
                    Tensor(np.array([0.5])))
    assert np.allclose(out.data, [[5.5]])


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        nn.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_linear_grad_wrt_weight():
    x = RNG.standard_normal((3, 4))
    w = RNG.standard_normal((4, 5))
    b = RNG.standard_normal(5)
    wt = Tensor(w, requires_grad=True)
    nn.linear(Tensor(x), wt, Tensor(b)).sum().backward()
    num = numerical_grad(lambda: nn.linear(Tensor(x), Tensor(w), Tensor(b)).item() if False
                         else float(nn.linear(Tensor(x), Tensor(w), Tensor(b)).data.sum()), w)
    assert rel_err(wt.grad, num) < 1e-5


# -- layer norm ----------------------------------------------------------------

def test_layer_norm_constant_channel_is_zero():
    x = Tensor(np.full((1, 1, 1, 8), 3.7))
    out = nn.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
    assert np.allclose(out.data, 0.0, atol=1e-6)


def test_layer_norm_two_values_symmetric():
    x = Tensor(np.array([[1.0, 3.0]]))
    out = nn.layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-15)
    assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-6)


def test_layer_norm_moments_before_affine():
    x = Tensor(RNG.standard_normal((2, 3, 3, 16)) * 4 + 2)
    out = nn.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)))
    assert np.allclose(out.data.mean(axis=-1), 0.0, atol=1e-6)
    assert np.allclose(out.data.var(axis=-1), 1.0, atol=1e-4)


def test_layer_norm_grad():
    x = RNG.standard_normal((2, 5))
    scale = RNG.standard_normal(5)
    shift = RNG.standard_normal(5)
    w = RNG.standard_normal((2, 5))

    def value(xa, sa, ha):
        out = nn.layer_norm(Tensor(xa), Tensor(sa), Tensor(ha))
        return float((out.data * w).sum())

    xt, st, ht = (Tensor(a, requires_grad=True) for a in (x, scale, shift))
    (nn.layer_norm(xt, st, ht) * Tensor(w)).sum().backward()
    for t, arr in ((xt, x), (st, scale), (ht, shift)):
        num = numerical_grad(lambda: value(x, scale, shift), arr)
        assert rel_err(t.grad, num) < 1e-5


# -- gelu / mlp ------------------------------------------------------------------

def test_gelu_zero():
    assert nn.gelu(Tensor(np.array(0.0))).item() == 0.0


def test_gelu_reflection_identity():
    # x * Phi(x) satisfies gelu(x) - gelu(-x) = x exactly
    x = RNG.standard_normal(50) * 3
    total = nn.gelu(Tensor(x)).data - nn.gelu(Tensor(-x)).data
    assert np.allclose(total, x, atol=1e-12)


def test_gelu_one_matches_high_precision_oracle():
    # x * Phi(x) at x=1 via mpmath
    expected = float(mpmath.mpf(1) * (mpmath.mpf(1) + mpmath.erf(mpmath.mpf(1) / mpmath.sqrt(2))) / 2)
    got = nn.gelu(Tensor(np.array(1.0))).item()
    assert abs(got - expected) < 1e-12
    assert abs(got - 0.841345) < 1e-6


def test_mlp_gelu_grad():
    x = RNG.standard_normal((3, 4))
    w1 = RNG.standard_normal((4, 8))
    b1 = RNG.standard_normal(8)
    w2 = RNG.standard_normal((8, 4))
    b2 = RNG.standard_normal(4)
    params = [w1, b1, w2, b2]
    tensors = [Tensor(p, requires_grad=True) for p in params]
    nn.mlp_gelu(Tensor(x), *tensors).sum().backward()

    def value():
        return float(nn.mlp_gelu(Tensor(x), *(Tensor(p) for p in params)).data.sum())

    for t, arr in zip(tensors, params):
        assert rel_err(t.grad, numerical_grad(value, arr)) < 1e-5


# -- windows ---------------------------------------------------------------------

def test_window_partition_shapes():
    out = nn.window_partition(Tensor(RNG.standard_normal((1, 8, 8, 16))), 4)
    assert out.shape == (4, 16, 16)
    out = nn.window_partition(Tensor(RNG.standard_normal((2, 56, 56, 96)).astype(np.float32)), 7)
    assert out.shape == (128, 49, 96)


def test_window_partition_reverse_bijection():
    x = RNG.standard_normal((3, 12, 8, 5))
    wins = nn.window_partition(Tensor(x), 4)
    back = nn.window_reverse(wins, 4, 12, 8)
    assert np.array_equal(back.data, x)


def test_window_partition_divisibility_error():
    with pytest.raises(ShapeError):
        nn.window_partition(Tensor(np.zeros((1, 9, 8, 2))), 4)


def test_window_partition_row_major_layout():
    # one channel, 4x4 grid, window 2: first window must hold rows 0-1, cols 0-1
    x = np.arange(16.0).reshape(1, 4, 4, 1)
    wins = nn.window_partition(Tensor(x), 2).data[..., 0]
    assert np.array_equal(wins[0], [0, 1, 4, 5])
    assert np.array_equal(wins[1], [2, 3, 6, 7])


def test_cyclic_shift_identity_and_inverse():
    x = RNG.standard_normal((2, 6, 6, 3))
    assert nn.cyclic_shift(Tensor(x), 0).data is not None
    assert np.array_equal(nn.cyclic_shift(Tensor(x), 0).data, x)
    shifted = nn.cyclic_shift(Tensor(x), 2)
    back = ad.roll(shifted, (2, 2), (1, 2))
    assert np.array_equal(back.data, x)


def test_cyclic_shift_hand_value():
    x = np.arange(16.0).reshape(1, 4, 4, 1)
    out = nn.cyclic_shift(Tensor(x), 2).data
    assert out[0, 0, 0, 0] == 10.0  # value formerly at (2, 2)


# -- shift mask -----------------------------------------------------------------

def test_shift_mask_zero_shift_all_zero():
    mask = nn.build_shift_mask(8, 8, 4, 0)
    assert mask.shape == (4, 16, 16)
    assert not mask.any()


def brute_force_region_zero_counts(h, w, window, shift):
    """Count allowed (same pre-shift region) pairs per window by enumeration."""
    labels = nn.shift_region_labels(h, w, window, shift)
    nh, nw = h // window, w // window
    counts = []
    for wi in range(nh):
        for wj in range(nw):
            block = labels[wi * window:(wi + 1) * window, wj * window:(wj + 1) * window].ravel()
            counts.append(sum(int(a == b) for a in block for b in block))
    return counts


def test_shift_mask_against_enumeration():
    mask = nn.build_shift_mask(8, 8, 4, 2)
    zero_counts = [(m == 0).sum() for m in mask]
    assert zero_counts == brute_force_region_zero_counts(8, 8, 4, 2)
    # the corner window crossing both wrap boundaries has 4 regions of 4
    # tokens: 4 allowed entries per row, 64 zero entries total
    assert zero_counts[-1] == 64
    rows_ok = (mask[-1] == 0).sum(axis=1)
    assert np.array_equal(rows_ok, np.full(16, 4))


def test_shift_mask_symmetry():
    for (h, w, win, s) in ((8, 8, 4, 2), (12, 8, 4, 1), (14, 14, 7, 3)):
        mask = nn.build_shift_mask(h, w, win, s)
        assert np.array_equal(mask, mask.transpose(0, 2, 1))


def test_shift_mask_value_is_large_negative():
    mask = nn.build_shift_mask(8, 8, 4, 2)
    vals = np.unique(mask)
    assert set(vals.tolist()) <= {nn.MASK_FILL, 0.0}


# -- window attention -------------------------------------------------------------

def test_uniform_attention_is_mean_of_values():
    # constant q or k makes all logits equal -> output is per-window mean of v
    n, t, c, heads = 3, 4, 6, 2
    q = Tensor(np.zeros((n, t, c)))
    k = Tensor(RNG.standard_normal((n, t, c)))
    v = Tensor(RNG.standard_normal((n, t, c)))
    out = nn.window_attention(q, k, v, heads, Tensor(np.eye(c)))
    assert np.allclose(out.data, v.data.mean(axis=1, keepdims=True), atol=1e-12)


def test_masked_tokens_get_no_weight():
    assert ad.softmax(Tensor(np.array([0.0, nn.MASK_FILL]))).data[1] < 1e-30
    # changing a masked token's value must not change the output
    n, t, c = 2, 4, 4
    q = RNG.standard_normal((n, t, c))
    k = RNG.standard_normal((n, t, c))
    v = RNG.standard_normal((n, t, c))
    mask = np.zeros((2, t, t), dtype=np.float64)
    mask[:, :, 0] = nn.MASK_FILL  # nobody may attend to token 0
    mask[:, 0, :] = 0.0           # except token 0 itself (softmax needs one entry)
    out1 = nn.window_attention(Tensor(q), Tensor(k), Tensor(v), 2, Tensor(np.eye(c)), mask=mask)
    v2 = v.copy()
    v2[:, 0, :] += 100.0
    out2 = nn.window_attention(Tensor(q), Tensor(k), Tensor(v2), 2, Tensor(np.eye(c)), mask=mask)
    assert np.allclose(out1.data[:, 1:], out2.data[:, 1:], atol=1e-12)


def test_window_attention_matches_brute_force_with_bias():
    n, t, c, heads = 4, 9, 8, 2
    q = RNG.standard_normal((n, t, c))
    k = RNG.standard_normal((n, t, c))
    v = RNG.standard_normal((n, t, c))
    bias = RNG.standard_normal((heads, t, t))
    w_out = RNG.standard_normal((c, c))
    b_out = RNG.standard_normal(c)
    got = nn.window_attention(Tensor(q), Tensor(k), Tensor(v), heads, Tensor(w_out),
                              Tensor(b_out), bias=Tensor(bias))
    want = brute_force_window_attention(q, k, v, heads, bias=bias, w_out=w_out, b_out=b_out)
    assert rel_err(got.data, want) < 1e-9


def test_window_attention_head_divisibility_error():
    with pytest.raises(ShapeError):
        nn.window_attention(Tensor(np.zeros((1, 4, 6))), Tensor(np.zeros((1, 4, 6))),
                            Tensor(np.zeros((1, 4, 6))), 4, Tensor(np.eye(6)))


def test_window_attention_softmax_rows_sum_to_one():
    # implicit through uniform case; direct check via softmax op on masked logits
    mask = nn.build_shift_mask(8, 8, 4, 2)
    logits = RNG.standard_normal((4, 16, 16)) + mask
    s = ad.softmax(Tensor(logits), axis=-1).data
    assert np.allclose(s.sum(-1), 1.0, atol=1e-6)


# -- parameter store / init -------------------------------------------------------

def test_parameter_store_unique_names():
    store = nn.ParameterStore()
    store.add("a.weight", np.zeros(3))
    with pytest.raises(ValueError, match="duplicate"):
        store.add("a.weight", np.zeros(3))


def test_parameter_store_load_state_mismatch():
    store = nn.ParameterStore()
    store.add("w", np.zeros((2, 2)))
    with pytest.raises(ValueError, match="name mismatch"):
        store.load_state({"other": np.zeros((2, 2))})
    with pytest.raises(ValueError, match="shape mismatch"):
        store.load_state({"w": np.zeros((3, 2))})


def test_trunc_normal_bounds_and_determinism():
    a = nn.trunc_normal(nn.rng_for(0, nn.STREAM_INIT), (1000,), std=0.02)
    b = nn.trunc_normal(nn.rng_for(0, nn.STREAM_INIT), (1000,), std=0.02)
    assert np.array_equal(a, b)
    assert np.abs(a).max() <= 0.04 + 1e-12
    assert a.dtype == np.float32


def test_rng_streams_are_independent():
    a = nn.rng_for(0, 1).random(4)
    b = nn.rng_for(0, 2).random(4)
    assert not np.array_equal(a, b)


def test_dropout_rate_zero_is_exact_passthrough():
    x = Tensor(RNG.standard_normal((3, 4)))
    assert nn.dropout(x, 0.0, nn.rng_for(0, 1)) is x
    assert nn.dropout(x, 0.5, None) is x


def test_dropout_zeroes_and_rescales():
    x = Tensor(np.ones((100, 100)))
    out = nn.dropout(x, 0.25, nn.rng_for(0, 1)).data
    dropped = (out == 0).mean()
    assert 0.2 < dropped < 0.3
    kept = out[out != 0]
    assert np.allclose(kept, 1.0 / 0.75)
