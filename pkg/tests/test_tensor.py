"""Tensor container, row-major addressing, symmetric quantization."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from macskip.errors import OutOfBounds, ShapeMismatch, UsageError
from macskip.numerics import FixedPoint, Q8_8
from macskip.tensor import (
    Shape,
    Tensor,
    dequantize_tensor,
    quantize_tensor,
    tensor_float,
    tensor_index,
)


class TestShape:
    def test_offsets_match_numpy_row_major(self):
        rng = np.random.default_rng(30)
        for dims in [(7,), (3, 5), (2, 3, 4), (2, 3, 4, 5)]:
            shape = Shape(dims)
            for _ in range(50):
                coords = tuple(int(rng.integers(0, d)) for d in dims)
                assert shape.offset(coords) == np.ravel_multi_index(coords, dims)

    def test_volume_and_rank(self):
        s = Shape((2, 3, 4))
        assert s.rank == 3 and s.volume == 24

    def test_out_of_bounds(self):
        s = Shape((2, 3))
        with pytest.raises(OutOfBounds):
            s.offset((2, 0))
        with pytest.raises(OutOfBounds):
            s.offset((0, -1))
        with pytest.raises(OutOfBounds):
            s.offset((0, 0, 0))

    def test_validation(self):
        with pytest.raises(ShapeMismatch):
            Shape(())
        with pytest.raises(ShapeMismatch):
            Shape((1, 2, 3, 4, 5))
        with pytest.raises(ShapeMismatch):
            Shape((3, 0))


class TestTensor:
    def test_flattens_and_checks_length(self):
        t = Tensor(Shape((2, 2)), np.arange(4.0, dtype=np.float32).reshape(2, 2))
        assert t.data.shape == (4,)
        assert np.array_equal(t.nd, [[0, 1], [2, 3]])
        with pytest.raises(ShapeMismatch):
            Tensor(Shape((2, 2)), np.zeros(5, dtype=np.float32))

    def test_scale_must_be_positive(self):
        with pytest.raises(UsageError):
            Tensor(Shape((1,)), np.zeros(1, dtype=np.float32), scale=0.0)

    def test_index_returns_typed_scalars(self):
        tf = tensor_float([1.5, -2.0], (2,))
        assert tensor_index(tf, (0,)) == 1.5
        q = quantize_tensor(tf, Q8_8)
        got = tensor_index(q, (1,))
        assert isinstance(got, FixedPoint)
        assert got.raw == q.data[1]


class TestQuantize:
    def test_spec_all_zero_rule(self):
        q = quantize_tensor(tensor_float([0.0, 0.0], (2,)), Q8_8)
        assert q.scale == 1.0
        assert np.array_equal(q.data, [0, 0])

    def test_spec_unit_range(self):
        q = quantize_tensor(tensor_float([1.0, -1.0], (2,)), Q8_8)
        assert q.scale == pytest.approx(1.0 / Q8_8.max_value)
        assert np.array_equal(q.data, [Q8_8.raw_max, -Q8_8.raw_max])

    def test_spec_single_element_round_trip(self):
        q = quantize_tensor(tensor_float([2.0], (1,)), Q8_8)
        back = dequantize_tensor(q)
        assert abs(back.data[0] - 2.0) <= q.scale * Q8_8.resolution

    def test_max_element_hits_top_code(self):
        rng = np.random.default_rng(31)
        v = rng.normal(0, 3, 100).astype(np.float32)
        q = quantize_tensor(tensor_float(v, (100,)), Q8_8)
        assert np.max(np.abs(q.data)) == Q8_8.raw_max

    def test_error_at_most_half_step(self):
        rng = np.random.default_rng(32)
        for _ in range(20):
            v = rng.normal(0, 2, 64).astype(np.float32)
            q = quantize_tensor(tensor_float(v, (64,)), Q8_8)
            # exact reconstruction; dequantize_tensor adds a float32 cast
            back = q.data.astype(np.float64) / 256 * q.scale
            step = q.scale * Q8_8.resolution
            assert np.max(np.abs(back - v.astype(np.float64))) <= step / 2
            stored = dequantize_tensor(q).data
            assert np.array_equal(stored, back.astype(np.float32))

    def test_already_fixed_rejected(self):
        q = quantize_tensor(tensor_float([1.0], (1,)), Q8_8)
        with pytest.raises(UsageError):
            quantize_tensor(q, Q8_8)
        with pytest.raises(UsageError):
            dequantize_tensor(tensor_float([1.0], (1,)))

    def test_non_finite_rejected(self):
        with pytest.raises(UsageError):
            quantize_tensor(tensor_float([np.inf, 1.0], (2,)), Q8_8)

    @given(st.lists(st.floats(min_value=-100, max_value=100, width=32),
                    min_size=1, max_size=32))
    def test_property_round_trip_bound(self, vals):
        t = tensor_float(vals, (len(vals),))
        q = quantize_tensor(t, Q8_8)
        back = q.data.astype(np.float64) / 256 * q.scale
        step = q.scale * Q8_8.resolution
        assert np.max(np.abs(back - t.data.astype(np.float64))) <= step / 2
