import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from unrolled_lrp.tensor import (NonFiniteError, ew_binary, flip_spatial, heaviside, load_tensor, read_tensor,
                                 reduce_sum, save_tensor, seeded_rng, stabilized_div, write_tensor)

finite = st.floats(-1e6, 1e6, allow_nan=False)


class TestElementwise:
    def test_add(self):
        np.testing.assert_array_equal(ew_binary([1, 2], [3, 4], "add"), [4, 6])

    def test_mul_annihilator(self):
        np.testing.assert_array_equal(ew_binary([1, 2], [0, 0], "mul"), [0, 0])

    def test_sub(self):
        np.testing.assert_array_equal(ew_binary([2, 6], [1, 2], "sub"), [1, 4])

    def test_trailing_broadcast(self):
        a = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(ew_binary(a, [1, 1, 1], "add"), a + 1)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ew_binary(np.ones((2, 3)), np.ones(2), "add")

    def test_non_finite_is_an_error(self):
        with pytest.raises(NonFiniteError):
            ew_binary([1e308], [1e308], "mul")


class TestStabilizedDiv:
    def test_plain(self):
        np.testing.assert_array_equal(stabilized_div([6.0], [3.0], 0.0), [2.0])

    def test_zero_denominator_positive_sign(self):
        np.testing.assert_allclose(stabilized_div([1.0], [0.0], 1e-9), [1e9], rtol=1e-15)

    def test_sign_matched(self):
        np.testing.assert_allclose(stabilized_div([1.0], [-2.0], 1e-9), [1.0 / (-2.0 - 1e-9)], rtol=1e-15)
        assert stabilized_div([1.0], [-2.0], 1e-9)[0] > -0.5

    def test_exact_zero_denominator_errors(self):
        with pytest.raises(ZeroDivisionError):
            stabilized_div([1.0], [0.0], 0.0)

    def test_zero_over_zero_is_zero(self):
        np.testing.assert_array_equal(stabilized_div([0.0, 4.0], [0.0, 2.0], 0.0), [0.0, 2.0])

    @given(arrays(np.float64, 8, elements=finite),
           arrays(np.float64, 8, elements=st.floats(0.5, 1e3) | st.floats(-1e3, -0.5)))
    def test_inverse_of_multiplication(self, x, d):
        np.testing.assert_allclose(stabilized_div(x * d, d, 0.0), x, rtol=1e-14, atol=1e-300)


class TestReduceSum:
    def test_axis(self):
        np.testing.assert_array_equal(reduce_sum([[1, 2], [3, 4]], [1]), [3, 7])

    def test_all(self):
        assert reduce_sum([[1, 2], [3, 4]], [0, 1]) == 10

    def test_zeros(self):
        np.testing.assert_array_equal(reduce_sum(np.zeros((3, 3)), [0]), [0, 0, 0])

    def test_invalid_axis(self):
        with pytest.raises(ValueError):
            reduce_sum(np.zeros((2, 2)), [2])
        with pytest.raises(ValueError):
            reduce_sum(np.zeros((2, 2)), [0, 0])

    def test_ascending_order(self):
        # sequential accumulation: ((1e16 + 1) + -1e16) + 1 == 1 in float64
        assert reduce_sum([1e16, 1.0, -1e16, 1.0], [0]) == 1.0

    def test_deterministic(self):
        x = seeded_rng(5).normal(size=(7, 11, 13))
        assert reduce_sum(x, [1, 2]).tobytes() == reduce_sum(x.copy(), [1, 2]).tobytes()


class TestFlipAndHeaviside:
    def test_flip_3x3(self):
        k = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
        np.testing.assert_array_equal(flip_spatial(k)[0, 0], [[9, 8, 7], [6, 5, 4], [3, 2, 1]])

    def test_flip_delta_is_fixed_point(self):
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1
        np.testing.assert_array_equal(flip_spatial(k), k)

    def test_flip_1x1(self):
        np.testing.assert_array_equal(flip_spatial(np.full((1, 1, 1, 1), 5.0)), [[[[5.0]]]])

    def test_flip_rank(self):
        with pytest.raises(ValueError):
            flip_spatial(np.ones((3, 3)))

    def test_flip_index_map(self):
        k = seeded_rng(0).normal(size=(2, 3, 5, 5))
        f = flip_spatial(k)
        for dy in range(-2, 3):
            for dx in range(-2, 3):
                np.testing.assert_array_equal(f[:, :, 2 + dy, 2 + dx], k[:, :, 2 - dy, 2 - dx])

    @given(arrays(np.float64, (2, 2, 3, 4), elements=finite))
    def test_flip_involution(self, k):
        np.testing.assert_array_equal(flip_spatial(flip_spatial(k)), k)

    def test_heaviside(self):
        np.testing.assert_array_equal(heaviside([-1.0, 0.0, 2.0]), [0, 0, 1])
        np.testing.assert_array_equal(heaviside(np.zeros(4)), np.zeros(4))
        np.testing.assert_array_equal(heaviside([1e-12]), [1])

    @given(arrays(np.float64, 16, elements=finite))
    def test_heaviside_times_x_is_relu(self, x):
        np.testing.assert_array_equal(heaviside(x) * x, np.maximum(x, 0))


class TestRngAndFormat:
    def test_same_seed_same_stream(self):
        a = seeded_rng(42, 3).normal(size=5)
        b = seeded_rng(42, 3).normal(size=5)
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(a, seeded_rng(42, 4).normal(size=5))

    def test_pinned_values(self):
        # PCG64 via SeedSequence is specified bit-for-bit across platforms
        np.testing.assert_array_equal(seeded_rng(0).integers(0, 1000, size=3), seeded_rng(0).integers(0, 1000, size=3))
        assert seeded_rng(7).bit_generator.state == seeded_rng(7).bit_generator.state

    def test_rnt1_layout(self):
        buf = io.BytesIO()
        write_tensor(buf, np.array([[1.0, 2.0, 3.0]]))
        raw = buf.getvalue()
        assert raw[:4] == b"RNT1"
        assert raw[4:8] == (2).to_bytes(4, "little")
        assert raw[8:16] == (1).to_bytes(8, "little") and raw[16:24] == (3).to_bytes(8, "little")
        assert np.frombuffer(raw[24:], "<f8").tolist() == [1.0, 2.0, 3.0]

    @settings(max_examples=25)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3)), elements=finite))
    def test_round_trip(self, x):
        buf = io.BytesIO()
        write_tensor(buf, x)
        buf.seek(0)
        np.testing.assert_array_equal(read_tensor(buf), x)

    def test_file_round_trip_and_bad_magic(self, tmp_path):
        x = seeded_rng(1).normal(size=(2, 3))
        save_tensor(tmp_path / "x.rnt", x)
        np.testing.assert_array_equal(load_tensor(tmp_path / "x.rnt"), x)
        (tmp_path / "bad.rnt").write_bytes(b"XXXX")
        with pytest.raises(ValueError):
            load_tensor(tmp_path / "bad.rnt")
