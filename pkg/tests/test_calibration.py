"""Threshold calibration against exact product-multiset oracles.

Small layers keep the product count under the sample cap, so collection
degenerates to the full multiset and thresholds must equal a nearest-rank
percentile computed here from first principles.
"""

import numpy as np
import pytest

from helpers import float_conv, float_linear
from macskip.calibration import (
    DEFAULT_SAMPLE_CAP,
    calibrate,
    collect_product_stats,
    percentile_nearest_rank,
    quantize_model,
    table_from_stats,
)
from macskip.errors import EmptyBatch, EmptySamples, UsageError
from macskip.kernels import LayerKind, LayerSpec, ModelGraph
from macskip.numerics import Q8_8
from macskip.tensor import tensor_float


def rank_oracle(values, p):
    """Nearest-rank percentile straight from the definition."""
    s = sorted(float(v) for v in values)
    rank = max(1, int(np.ceil(p / 100.0 * len(s))))
    return s[rank - 1]


class TestNearestRank:
    def test_known_values(self):
        assert percentile_nearest_rank(range(1, 11), 20) == 2
        assert percentile_nearest_rank([5], 50) == 5
        assert percentile_nearest_rank([1, 2, 3, 4], 50) == 2
        assert percentile_nearest_rank([3, 1, 2], 100) == 3

    def test_p_zero_is_minimum(self):
        assert percentile_nearest_rank([7, 3, 9], 0) == 3

    def test_matches_definition_on_random_multisets(self):
        rng = np.random.default_rng(70)
        for _ in range(300):
            n = int(rng.integers(1, 60))
            vals = rng.choice([0.0, 0.5, 1.0, 2.0, 7.5], n)  # duplicates likely
            p = float(rng.uniform(0, 100))
            assert percentile_nearest_rank(vals, p) == rank_oracle(vals, p)

    def test_monotone_in_p(self):
        rng = np.random.default_rng(71)
        vals = rng.exponential(1.0, 97)
        prev = -np.inf
        for p in np.linspace(0, 100, 41):
            cur = percentile_nearest_rank(vals, p)
            assert cur >= prev
            prev = cur

    def test_validation(self):
        with pytest.raises(EmptySamples):
            percentile_nearest_rank([], 50)
        with pytest.raises(UsageError):
            percentile_nearest_rank([1.0], -1)
        with pytest.raises(UsageError):
            percentile_nearest_rank([1.0], 100.5)


def linear_products(batch, w):
    """All |x_i * w_ij| over a (B, m) batch, float32 operand precision."""
    b32 = batch.astype(np.float32).astype(np.float64)
    w64 = w.astype(np.float32).astype(np.float64)
    return np.abs(b32[:, :, None] * w64[None, :, :]).reshape(-1)


def conv_products(batch, w):
    """All |window_elem * weight| pairs of a valid stride-1 conv."""
    b, c, h, wd = batch.shape
    oc, ic, kh, kw = w.shape
    vals = []
    for bi in range(b):
        for o in range(oc):
            for oy in range(h - kh + 1):
                for ox in range(wd - kw + 1):
                    for i in range(ic):
                        for ky in range(kh):
                            for kx in range(kw):
                                vals.append(abs(
                                    np.float64(np.float32(batch[bi, i, oy + ky, ox + kx]))
                                    * np.float64(np.float32(w[o, i, ky, kx]))))
    return np.array(vals)


class TestCollectExact:
    def test_linear_full_multiset(self):
        rng = np.random.default_rng(72)
        model = float_linear(rng, 3, 2)
        batch = rng.normal(0, 1, (2, 1, 1, 3)).astype(np.float32)
        prods = linear_products(batch.reshape(2, 3), model.layers[0].weights.nd)
        for p in (0.0, 17.0, 50.0, 80.0, 100.0):
            table = calibrate(model, batch, p)
            want = 0.0 if p == 0.0 else rank_oracle(prods, p)
            assert table.layers[0].thresholds.shape == (1,)
            assert table.layers[0].thresholds[0] == want
        assert table.layers[0].sample_count == prods.size == 12

    def test_conv_full_multiset(self):
        rng = np.random.default_rng(73)
        model = float_conv(rng, 1, 3, 3, 2, 2)
        batch = rng.normal(0, 1, (2, 1, 3, 3)).astype(np.float32)
        prods = conv_products(batch, model.layers[0].weights.nd)
        for p in (25.0, 60.0, 100.0):
            table = calibrate(model, batch, p)
            assert table.layers[0].thresholds[0] == rank_oracle(prods, p)
        assert table.layers[0].sample_count == prods.size == 64

    def test_zero_products_are_in_the_distribution(self):
        rng = np.random.default_rng(74)
        model = float_linear(rng, 10, 4, bias=False)
        batch = rng.normal(0, 1, (3, 1, 1, 10)).astype(np.float32)
        batch[:, :, :, :7] = 0.0  # 70% of inputs exactly zero
        table = calibrate(model, batch, 60.0)
        assert table.layers[0].thresholds[0] == 0.0
        table = calibrate(model, batch, 90.0)
        assert table.layers[0].thresholds[0] > 0.0

    def test_grouped_rows_partition_products(self):
        rng = np.random.default_rng(75)
        model = float_linear(rng, 4, 3, bias=False)
        batch = rng.normal(0, 1, (2, 1, 1, 4)).astype(np.float32)
        w = model.layers[0].weights.nd
        table = calibrate(model, batch, 50.0, groups=2)
        assert table.layers[0].thresholds.shape == (2,)
        x2 = batch.reshape(2, 4)
        for g in range(2):
            prods = linear_products(x2[:, 2 * g:2 * g + 2], w[2 * g:2 * g + 2])
            assert table.layers[0].thresholds[g] == rank_oracle(prods, 50.0)

    def test_groups_must_divide(self):
        rng = np.random.default_rng(76)
        model = float_linear(rng, 5, 2)
        batch = rng.normal(0, 1, (1, 1, 1, 5)).astype(np.float32)
        with pytest.raises(UsageError):
            calibrate(model, batch, 50.0, groups=2)

    def test_activations_flow_through_relu_and_pool(self):
        """The linear layer must see post-ReLU, post-pool activations."""
        rng = np.random.default_rng(77)
        conv_w = rng.normal(0, 0.7, (2, 1, 3, 3)).astype(np.float32)
        fc_w = rng.normal(0, 0.7, (8, 3)).astype(np.float32)
        model = ModelGraph([
            LayerSpec(kind=LayerKind.CONV2D, name="c", weights=tensor_float(conv_w, conv_w.shape)),
            LayerSpec(kind=LayerKind.RELU, name="r"),
            LayerSpec(kind=LayerKind.MAXPOOL, name="p", pool_size=2),
            LayerSpec(kind=LayerKind.LINEAR, name="f", weights=tensor_float(fc_w, fc_w.shape)),
        ], input_shape=(1, 6, 6))
        batch = rng.normal(0, 1, (2, 1, 6, 6)).astype(np.float32)
        # independent float forward up to the linear layer
        acts = []
        for bi in range(2):
            out = np.zeros((2, 4, 4), dtype=np.float32)
            for o in range(2):
                for oy in range(4):
                    for ox in range(4):
                        out[o, oy, ox] = np.sum(
                            batch[bi, 0, oy:oy + 3, ox:ox + 3] * conv_w[o, 0])
            out = np.maximum(out, 0.0)
            out = out.reshape(2, 2, 2, 2, 2).max(axis=(2, 4))
            acts.append(out.reshape(-1))
        prods = linear_products(np.stack(acts), fc_w)
        table = calibrate(model, batch, 70.0)
        got = table.layers[3].thresholds[0]
        want = rank_oracle(prods, 70.0)
        assert got == pytest.approx(want, rel=1e-6)

    def test_input_and_activation_ranges_captured(self):
        rng = np.random.default_rng(78)
        model = float_linear(rng, 6, 2)
        batch = rng.normal(0, 2, (4, 1, 1, 6)).astype(np.float32)
        table = calibrate(model, batch, 50.0)
        assert table.input_max_abs == float(np.max(np.abs(batch)))
        w = model.layers[0].weights.nd
        out = batch.reshape(4, 6).astype(np.float32) @ w.astype(np.float32)
        out = out + model.layers[0].bias
        assert table.layers[0].act_max_abs == pytest.approx(
            float(np.max(np.abs(out))), rel=1e-6)


class TestSampling:
    def test_cap_limits_and_seed_reproduces(self):
        rng = np.random.default_rng(79)
        model = float_linear(rng, 32, 32, bias=False)
        batch = rng.normal(0, 1, (4, 1, 1, 32)).astype(np.float32)
        t1 = calibrate(model, batch, 75.0, sample_cap=128, seed=5)
        t2 = calibrate(model, batch, 75.0, sample_cap=128, seed=5)
        assert t1.layers[0].sample_count == 128 < 4 * 32 * 32
        assert np.array_equal(t1.layers[0].thresholds, t2.layers[0].thresholds)

    def test_sampled_threshold_near_population(self):
        rng = np.random.default_rng(80)
        model = float_linear(rng, 64, 64, bias=False)
        batch = rng.normal(0, 1, (8, 1, 1, 64)).astype(np.float32)
        full = calibrate(model, batch, 50.0)  # cap 65536 covers 32768 products
        sub = calibrate(model, batch, 50.0, sample_cap=4096, seed=1)
        assert full.layers[0].sample_count == 8 * 64 * 64
        assert sub.layers[0].thresholds[0] == pytest.approx(
            full.layers[0].thresholds[0], rel=0.15)

    def test_one_sweep_many_percentiles(self):
        rng = np.random.default_rng(81)
        model = float_linear(rng, 16, 8)
        batch = rng.normal(0, 1, (4, 1, 1, 16)).astype(np.float32)
        stats = collect_product_stats(model, batch)
        prev = np.zeros(1)
        for p in (10.0, 40.0, 70.0, 95.0):
            table = table_from_stats(stats, p)
            assert table.percentile == p
            assert np.all(table.layers[0].thresholds >= prev)
            prev = table.layers[0].thresholds
        direct = calibrate(model, batch, 70.0)
        assert np.array_equal(table_from_stats(stats, 70.0).layers[0].thresholds,
                              direct.layers[0].thresholds)

    def test_validation(self):
        rng = np.random.default_rng(82)
        model = float_linear(rng, 4, 2)
        batch = rng.normal(0, 1, (2, 1, 1, 4)).astype(np.float32)
        with pytest.raises(EmptyBatch):
            collect_product_stats(model, np.zeros((0, 1, 1, 4), dtype=np.float32))
        with pytest.raises(EmptyBatch):
            collect_product_stats(model, batch.reshape(2, 4))
        with pytest.raises(UsageError):
            collect_product_stats(model, batch, sample_cap=0)
        with pytest.raises(UsageError):
            calibrate(model, batch, 101.0)
        fixed = quantize_model(model, calibrate(model, batch, 50.0))
        with pytest.raises(UsageError):
            collect_product_stats(fixed, batch)


class TestQuantizeModel:
    def make(self, seed=83, p=50.0):
        rng = np.random.default_rng(seed)
        model = float_linear(rng, 6, 3)
        batch = rng.normal(0, 1.5, (4, 1, 1, 6)).astype(np.float32)
        table = calibrate(model, batch, p)
        return model, batch, table

    def test_scales_and_bias(self):
        model, batch, table = self.make()
        fixed = quantize_model(model, table)
        assert fixed.is_fixed and fixed.qformat == Q8_8
        assert fixed.input_scale == table.input_max_abs / Q8_8.max_value
        layer = fixed.layers[0]
        assert layer.out_scale == table.layers[0].act_max_abs / Q8_8.max_value
        want_bias = np.clip(
            np.rint(model.layers[0].bias.astype(np.float64) / layer.out_scale * 256),
            Q8_8.raw_min, Q8_8.raw_max).astype(np.int32)
        assert np.array_equal(layer.bias_raw, want_bias)
        assert layer.percentile == table.percentile
        assert np.array_equal(layer.thresholds, table.layers[0].thresholds)

    def test_thresholds_are_copied(self):
        model, _, table = self.make()
        fixed = quantize_model(model, table)
        table.layers[0].thresholds[0] = 1e9
        assert fixed.layers[0].thresholds[0] != 1e9

    def test_float_model_untouched(self):
        model, _, table = self.make()
        before = model.layers[0].weights.nd.copy()
        quantize_model(model, table)
        assert not model.is_fixed
        assert np.array_equal(model.layers[0].weights.nd, before)

    def test_missing_entry_rejected(self):
        model, _, table = self.make()
        del table.layers[0]
        with pytest.raises(UsageError):
            quantize_model(model, table)

    def test_double_quantize_rejected(self):
        model, _, table = self.make()
        fixed = quantize_model(model, table)
        with pytest.raises(UsageError):
            quantize_model(fixed, table)

    def test_non_mac_layers_pass_through(self):
        rng = np.random.default_rng(84)
        w = rng.normal(0, 0.5, (4, 1, 2, 2)).astype(np.float32)
        model = ModelGraph([
            LayerSpec(kind=LayerKind.CONV2D, name="c", weights=tensor_float(w, w.shape)),
            LayerSpec(kind=LayerKind.RELU, name="r"),
            LayerSpec(kind=LayerKind.MAXPOOL, name="p", pool_size=2),
        ], input_shape=(1, 5, 5))
        batch = rng.normal(0, 1, (2, 1, 5, 5)).astype(np.float32)
        fixed = quantize_model(model, calibrate(model, batch, 30.0))
        assert [l.kind for l in fixed.layers] == [LayerKind.CONV2D, LayerKind.RELU,
                                                  LayerKind.MAXPOOL]
        assert fixed.layers[2].pool_size == 2

    def test_default_cap_is_practical(self):
        assert DEFAULT_SAMPLE_CAP == 1 << 16
