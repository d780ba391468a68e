import numpy as np
import pytest

from myoseg.errors import ParameterError, ShapeError
from myoseg.tensor import (RngStream, coord_of, create, derive_stream,
                           flat_index, strides_for)


class TestCreate:
    def test_zero_fill(self):
        t = create([2, 2], 0.0)
        assert t.shape == (2, 2)
        assert np.all(t == 0.0)

    def test_single_element(self):
        t = create([1], 3.5)
        assert t.tolist() == [3.5]

    def test_three_dims(self):
        t = create([3, 2, 2], 1.0)
        assert t.size == 12
        assert np.all(t == 1.0)

    @pytest.mark.parametrize("shape", [[0], [2, 0], [-1], [3, -2]])
    def test_bad_extent(self, shape):
        with pytest.raises(ShapeError):
            create(shape, 0.0)

    def test_row_major_contiguous(self):
        t = create([4, 5], 0.0)
        assert t.flags["C_CONTIGUOUS"]


class TestIndexing:
    def test_strides(self):
        assert strides_for([3, 4, 5]) == (20, 5, 1)

    def test_round_trip(self):
        shape = (3, 4, 5)
        for flat in range(3 * 4 * 5):
            coord = coord_of(flat, shape)
            assert flat_index(coord, shape) == flat

    def test_matches_numpy_layout(self):
        x = np.arange(24).reshape(2, 3, 4)
        for coord in np.ndindex(*x.shape):
            assert x[coord] == x.reshape(-1)[flat_index(coord, x.shape)]


class TestRngStream:
    def test_normal_determinism(self):
        a = RngStream(9).normal((16,), 0.0, 1.0)
        b = RngStream(9).normal((16,), 0.0, 1.0)
        assert np.array_equal(a, b)

    def test_counter_advances(self):
        r = RngStream(9)
        a = r.normal((4,), 0.0, 1.0)
        b = r.normal((4,), 0.0, 1.0)
        assert r.counter == 2
        assert not np.array_equal(a, b)

    def test_same_counter_same_values(self):
        a = RngStream(9, counter=5).normal((8,), 0.0, 1.0)
        b = RngStream(9, counter=5).normal((8,), 0.0, 1.0)
        assert np.array_equal(a, b)

    def test_degenerate_normal(self):
        t = RngStream(1).normal((10,), 2.5, 0.0)
        assert np.all(t == 2.5)

    def test_negative_std_rejected(self):
        with pytest.raises(ParameterError):
            RngStream(1).normal((3,), 0.0, -1.0)

    def test_normal_statistics(self):
        t = RngStream(123).normal((10000,), 0.0, 1.0, dtype=np.float64)
        assert abs(t.mean()) < 0.05
        assert abs(t.std() - 1.0) < 0.05

    def test_uniform_range(self):
        t = RngStream(5).uniform((1000,), -2.0, 3.0)
        assert t.min() >= -2.0
        assert t.max() < 3.0

    def test_uniform_degenerate(self):
        t = RngStream(5).uniform((7,), 4.0, 4.0)
        assert np.all(t == 4.0)

    def test_uniform_bad_bounds(self):
        with pytest.raises(ParameterError):
            RngStream(5).uniform((3,), 1.0, 0.0)

    def test_uniform_statistics(self):
        t = RngStream(321).uniform((10000,), 0.0, 1.0, dtype=np.float64)
        assert abs(t.mean() - 0.5) < 0.02

    def test_seed_separation(self):
        a = RngStream(1).normal((8,), 0.0, 1.0)
        b = RngStream(2).normal((8,), 0.0, 1.0)
        assert not np.array_equal(a, b)


class TestDeriveStream:
    def test_deterministic(self):
        assert derive_stream(7, 3, 5).seed == derive_stream(7, 3, 5).seed

    def test_index_sensitivity(self):
        seeds = {derive_stream(7, e, i).seed
                 for e in range(4) for i in range(4)}
        assert len(seeds) == 16

    def test_fresh_counter(self):
        assert derive_stream(7, 1).counter == 0
