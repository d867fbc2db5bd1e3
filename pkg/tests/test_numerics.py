"""Kernel contracts: shapes, worked values, and elementary identities."""

import numpy as np
import pytest

from sfde import ops
from sfde.autodiff import Tensor
from sfde.layers import MultiHeadSelfAttention


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def test_conv_ones_kernel_counts_window_overlap():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    y = ops.conv2d(x, w, padding=1)
    assert y.shape == (1, 1, 3, 3)
    assert y.data[0, 0, 1, 1] == pytest.approx(9.0)
    for i, j in [(0, 0), (0, 2), (2, 0), (2, 2)]:
        assert y.data[0, 0, i, j] == pytest.approx(4.0)


def test_conv_zero_input_yields_bias(rng):
    x = Tensor(np.zeros((2, 3, 5, 5)))
    w = Tensor(rng.normal(size=(4, 3, 3, 3)))
    b = Tensor(rng.normal(size=4))
    y = ops.conv2d(x, w, b, padding=1)
    for c in range(4):
        assert np.allclose(y.data[:, c], b.data[c])


def test_conv_dilated_shape():
    x = Tensor(np.zeros((1, 1, 5, 5)))
    w = Tensor(np.zeros((1, 1, 3, 3)))
    y = ops.conv2d(x, w, padding=2, dilation=2)
    assert y.shape == (1, 1, 5, 5)


def test_conv_shape_formula_randomized(rng):
    for _ in range(50):
        h = int(rng.integers(4, 12))
        w = int(rng.integers(4, 12))
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        dil = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 3))
        eff = dil * (k - 1) + 1
        if h + 2 * pad < eff or w + 2 * pad < eff:
            continue
        x = Tensor(rng.normal(size=(1, 2, h, w)))
        wt = Tensor(rng.normal(size=(3, 2, k, k)))
        y = ops.conv2d(x, wt, stride=stride, padding=pad, dilation=dil)
        eh = (h + 2 * pad - dil * (k - 1) - 1) // stride + 1
        ew = (w + 2 * pad - dil * (k - 1) - 1) // stride + 1
        assert y.shape == (1, 3, eh, ew)


def test_conv_linearity(rng):
    x = Tensor(rng.normal(size=(1, 2, 6, 6)))
    y = Tensor(rng.normal(size=(1, 2, 6, 6)))
    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    mix = Tensor(2.0 * x.data - 0.5 * y.data)
    lhs = ops.conv2d(mix, w, padding=1).data
    rhs = (2.0 * ops.conv2d(x, w, padding=1).data
           - 0.5 * ops.conv2d(y, w, padding=1).data)
    assert np.abs(lhs - rhs).max() < 1e-5 * max(1.0, np.abs(rhs).max())


def test_conv_channel_mismatch_rejected(rng):
    x = Tensor(rng.normal(size=(1, 3, 5, 5)))
    w = Tensor(rng.normal(size=(4, 2, 3, 3)))
    with pytest.raises(ops.ShapeError):
        ops.conv2d(x, w)


def test_conv_grouped_matches_per_group_conv(rng):
    x = Tensor(rng.normal(size=(1, 4, 5, 5)))
    w = Tensor(rng.normal(size=(6, 2, 3, 3)))
    y = ops.conv2d(x, w, padding=1, groups=2)
    lo = ops.conv2d(Tensor(x.data[:, :2]), Tensor(w.data[:3]), padding=1)
    hi = ops.conv2d(Tensor(x.data[:, 2:]), Tensor(w.data[3:]), padding=1)
    assert np.allclose(y.data, np.concatenate([lo.data, hi.data], axis=1))


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------

def _bn_buffers(c):
    return np.zeros(c), np.ones(c)


def test_batch_norm_identity_statistics(rng):
    x = rng.normal(size=(64, 3, 4, 4))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3),
                                                           keepdims=True)
    rm, rv = _bn_buffers(3)
    y = ops.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                       rm, rv, training=True)
    assert np.abs(y.data - x).max() < 1e-4


def test_batch_norm_zero_gamma_gives_beta(rng):
    rm, rv = _bn_buffers(2)
    y = ops.batch_norm(Tensor(rng.normal(size=(4, 2, 3, 3))),
                       Tensor(np.zeros(2)), Tensor(np.full(2, 0.7)),
                       rm, rv, training=True)
    assert np.allclose(y.data, 0.7)


def test_batch_norm_two_sample_closed_form():
    x = np.zeros((2, 1, 1, 1))
    x[0] = -1.0
    x[1] = 1.0
    rm, rv = _bn_buffers(1)
    y = ops.batch_norm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                       rm, rv, training=True)
    assert np.abs(np.abs(y.data) - 1.0).max() < 1e-4


def test_batch_norm_rejects_single_sample_training():
    rm, rv = _bn_buffers(1)
    with pytest.raises(ops.ShapeError):
        ops.batch_norm(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.ones(1)),
                       Tensor(np.zeros(1)), rm, rv, training=True)


def test_batch_norm_eval_uses_running_statistics(rng):
    rm = np.array([1.0])
    rv = np.array([4.0])
    x = rng.normal(size=(3, 1, 2, 2))
    y = ops.batch_norm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                       rm, rv, training=False)
    assert np.abs(y.data - (x - 1.0) / np.sqrt(4.0 + 1e-5)).max() < 1e-6


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def test_sigmoid_midpoint_and_range(rng):
    assert float(ops.sigmoid(Tensor(np.zeros(1))).data[0]) == pytest.approx(0.5)
    y = ops.sigmoid(Tensor(rng.normal(size=100) * 10)).data
    assert np.all(y > 0) and np.all(y < 1)


def test_softmax_uniform_and_sum(rng):
    y = ops.softmax(Tensor(np.zeros(4))).data
    assert np.allclose(y, 0.25)
    z = ops.softmax(Tensor(rng.normal(size=(5, 7)) * 50), axis=-1).data
    assert np.abs(z.sum(axis=-1) - 1.0).max() < 1e-6


def test_gelu_values():
    y = ops.gelu(Tensor(np.array([0.0, 1.0, -1.0], dtype=np.float64))).data
    assert y[0] == pytest.approx(0.0)
    # exact Gaussian CDF form: x * Phi(x)
    from scipy.stats import norm
    assert y[1] == pytest.approx(1.0 * norm.cdf(1.0), abs=1e-7)
    assert y[2] == pytest.approx(-1.0 * norm.cdf(-1.0), abs=1e-7)


def test_relu_and_softplus(rng):
    x = rng.normal(size=32)
    assert np.allclose(ops.relu(Tensor(x)).data, np.maximum(x, 0))
    sp = ops.softplus(Tensor(np.array([0.0, 50.0, -50.0]))).data
    assert sp[0] == pytest.approx(np.log(2))
    assert sp[1] == pytest.approx(50.0)
    assert sp[2] >= 0


# ---------------------------------------------------------------------------
# pooling / resampling
# ---------------------------------------------------------------------------

def test_adaptive_pool_quadrants():
    x = Tensor(np.arange(1, 17, dtype=np.float64).reshape(1, 1, 4, 4))
    y = ops.adaptive_avg_pool(x, 2, 2)
    assert np.allclose(y.data[0, 0], [[3.5, 5.5], [11.5, 13.5]])


def test_adaptive_pool_global_mean(rng):
    x = rng.normal(size=(2, 3, 5, 7))
    y = ops.adaptive_avg_pool(Tensor(x), 1, 1)
    assert np.allclose(y.data[..., 0, 0], x.mean(axis=(-2, -1)))


def test_adaptive_pool_constant_any_grid():
    x = Tensor(np.full((1, 2, 6, 6), 3.25))
    for oh, ow in [(1, 1), (2, 3), (4, 4), (6, 6)]:
        assert np.allclose(ops.adaptive_avg_pool(x, oh, ow).data, 3.25)


def test_adaptive_pool_rejects_zero_extent():
    with pytest.raises(ops.ShapeError):
        ops.adaptive_avg_pool(Tensor(np.zeros((1, 1, 4, 4))), 0, 2)


def test_upsample_closed_form_weights():
    x = Tensor(np.array([0.0, 1.0]).reshape(1, 1, 1, 2))
    y = ops.bilinear_upsample(x, 1, 4)
    assert np.allclose(y.data[0, 0, 0], [0.0, 0.25, 0.75, 1.0])


def test_upsample_preserves_constants():
    x = Tensor(np.full((1, 2, 3, 3), -1.5))
    assert np.allclose(ops.bilinear_upsample(x, 7, 9).data, -1.5)


def test_upsample_single_source_broadcasts():
    x = Tensor(np.full((1, 1, 1, 1), 0.3))
    assert np.allclose(ops.bilinear_upsample(x, 4, 5).data, 0.3)


# ---------------------------------------------------------------------------
# GeM pooling
# ---------------------------------------------------------------------------

def test_gem_hand_values():
    x = Tensor(np.array([1.0, 3.0]).reshape(1, 1, 2))
    assert ops.gem_pool(x, 1.0).data.item() == pytest.approx(2.0)
    assert ops.gem_pool(x, 2.0).data.item() == pytest.approx(np.sqrt(5.0),
                                                             abs=1e-5)
    assert abs(ops.gem_pool(x, 64.0).data.item() - 3.0) < 0.05


def test_gem_rejects_p_below_one():
    with pytest.raises(ValueError):
        ops.gem_pool(Tensor(np.ones((1, 2, 2))), 0.5)


def test_gem_monotone_in_p(rng):
    for _ in range(100):
        x = Tensor(rng.uniform(0.0, 2.0, size=(2, 3, 3)))
        vals = [ops.gem_pool(x, p).data for p in (1.0, 2.0, 4.0, 8.0, 32.0)]
        for lo, hi in zip(vals, vals[1:]):
            assert np.all(lo <= hi + 1e-9)


def test_gem_constant_map_fixed_point():
    x = Tensor(np.full((3, 4, 4), 0.8))
    for p in (1.0, 3.0, 17.0):
        assert np.allclose(ops.gem_pool(x, p).data, 0.8, atol=1e-6)


# ---------------------------------------------------------------------------
# self-attention
# ---------------------------------------------------------------------------

def test_mhsa_rows_sum_to_one(rng):
    attn = MultiHeadSelfAttention(8, 2, rng, dtype=np.float64)
    x = Tensor(rng.normal(size=(1, 4, 8)))
    attn(x)
    rows = attn.last_attention
    assert rows.shape[-2:] == (4, 4)
    assert np.abs(rows.sum(axis=-1) - 1.0).max() < 1e-6


def test_mhsa_identical_tokens_identical_outputs(rng):
    attn = MultiHeadSelfAttention(8, 2, rng, dtype=np.float64)
    tok = rng.normal(size=8)
    x = Tensor(np.tile(tok, (1, 5, 1)))
    y = attn(x).data
    assert np.abs(y - y[:, :1]).max() < 1e-10


def test_mhsa_rejects_indivisible_heads(rng):
    with pytest.raises(ops.ShapeError):
        MultiHeadSelfAttention(6, 4, rng)


# ---------------------------------------------------------------------------
# determinism
# ---------------------------------------------------------------------------

def test_kernels_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(1, 2, 6, 6)))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        y = ops.conv2d(x, w, padding=1)
        y = ops.gelu(y)
        y = ops.gem_pool(ops.add_const(ops.sigmoid(y), 0.1), 3.0)
        return y.data.copy()

    a, b = run(), run()
    assert np.array_equal(a, b)
