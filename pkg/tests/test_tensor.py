import io

import numpy as np
import pytest

from snlab.tensor import (
    DimensionError,
    fill_normal,
    make_rng,
    read_tensor,
    reduce_mean,
    write_tensor,
    zeros,
)


class TestZeros:
    def test_single(self):
        z = zeros((1, 1, 1, 1))
        assert z.shape == (1, 1, 1, 1) and z[0, 0, 0, 0] == 0.0

    def test_size(self):
        z = zeros((2, 3, 4, 5))
        assert z.size == 120 and not z.any()

    def test_sum(self):
        assert zeros((1, 1, 2, 2)).sum() == 0.0

    @pytest.mark.parametrize("dims", [(0, 1, 1, 1), (1, 1, 0, 3), (1, 2, 3)])
    def test_bad_dims(self, dims):
        with pytest.raises(DimensionError):
            zeros(dims)

    def test_dtype_and_layout(self):
        z = zeros((2, 3, 4, 5))
        assert z.dtype == np.float64 and z.flags["C_CONTIGUOUS"]

    def test_index_round_trip(self):
        z = zeros((2, 3, 4, 5))
        z[1, 2, 3, 4] = 0.1 + 0.2
        assert z[1, 2, 3, 4] == 0.1 + 0.2
        # N-major NCHW offset
        assert z.reshape(-1)[((1 * 3 + 2) * 4 + 3) * 5 + 4] == 0.1 + 0.2


class TestFillNormal:
    def test_zero_std(self):
        x = fill_normal((1, 1, 1, 1), make_rng(7), 0.0, 0.0)
        assert x.tolist() == [[[[0.0]]]]

    def test_deterministic(self):
        a = fill_normal((2, 3, 4, 5), make_rng(7))
        b = fill_normal((2, 3, 4, 5), make_rng(7))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, fill_normal((2, 3, 4, 5), make_rng(8)))

    def test_sample_mean(self):
        x = fill_normal((4, 8, 8, 8), make_rng(7), 0.0, 1.0)
        assert abs(x.mean()) < 0.1
        assert abs(x.std() - 1.0) < 0.1

    def test_negative_std(self):
        with pytest.raises(ValueError):
            fill_normal((1, 1, 1, 1), make_rng(0), 0.0, -1.0)

    def test_frozen_stream(self):
        # Philox output is fixed by (key, counter); recorded once, must never change
        assert make_rng(7).integers(0, 2**32, size=3).tolist() == [1153793966, 2013555774, 4182739653]

    def test_streams_independent(self):
        a = make_rng(3, 1).normal(size=5)
        b = make_rng(3, 2).normal(size=5)
        assert not np.array_equal(a, b)
        assert np.array_equal(a, make_rng(3, 1).normal(size=5))


class TestReduceMean:
    def test_constant(self):
        x = np.full((2, 3, 4, 5), 3.5)
        for axes in ("N", "HW", "NCHW", "CH"):
            assert np.all(reduce_mean(x, axes).values == 3.5)

    def test_two_point(self):
        x = np.array([1.0, 3.0]).reshape(1, 1, 1, 2)
        r = reduce_mean(x, "W")
        assert r.axes == "NCH" and r.values.ravel().tolist() == [2.0]

    def test_hw_against_loops(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        r = reduce_mean(x, {"H", "W"})
        assert r.axes == "NC"
        for n in range(2):
            for c in range(3):
                s = 0.0
                for i in range(4):
                    for j in range(5):
                        s += x[n, c, i, j]
                assert abs(r.values[n, c] - s / 20) <= 1e-15

    def test_all_axes(self, rng):
        x = rng.normal(loc=2.0, size=(2, 3, 4, 5))
        total = 0.0
        for v in x.ravel():
            total += v
        m = total / x.size
        assert abs(float(reduce_mean(x, "NCHW").values) - m) <= 1e-13 * (1 + abs(m))

    def test_empty_axes(self):
        with pytest.raises(ValueError):
            reduce_mean(zeros((1, 1, 1, 1)), "")


class TestDump:
    def test_round_trip(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        buf = io.BytesIO()
        write_tensor(buf, x)
        raw = buf.getvalue()
        assert raw[:4] == b"SNT4" and len(raw) == 4 + 16 + 8 * 120
        assert np.frombuffer(raw[4:20], "<u4").tolist() == [2, 3, 4, 5]
        y = read_tensor(io.BytesIO(raw))
        assert np.array_equal(x, y)

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            read_tensor(io.BytesIO(b"XXXX" + bytes(16)))

    def test_truncated(self, rng):
        buf = io.BytesIO()
        write_tensor(buf, rng.normal(size=(1, 1, 2, 2)))
        with pytest.raises(ValueError):
            read_tensor(io.BytesIO(buf.getvalue()[:-1]))
