import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coreinfer import kernels


def matvec_oracle(m, v):
    """Schoolbook loop, float64 accumulation."""
    m = np.asarray(m, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(m.shape[0])
    for r in range(m.shape[0]):
        for c in range(m.shape[1]):
            out[r] += m[r, c] * v[c]
    return out


class TestMatvec:
    def test_schoolbook_example(self):
        m = [[1.0, 2.0], [3.0, 4.0]]
        v = [1.0, 1.0]
        assert np.allclose(kernels.matvec(m, v), matvec_oracle(m, v))
        assert kernels.matvec(m, v).tolist() == [3.0, 7.0]

    def test_identity(self):
        assert kernels.matvec(np.eye(3, dtype=np.float32), [5.0, 6.0, 7.0]).tolist() == [5.0, 6.0, 7.0]

    def test_zero_matrix(self):
        assert kernels.matvec(np.zeros((2, 3), dtype=np.float32), [1.0, 2.0, 3.0]).tolist() == [0.0, 0.0]

    def test_shape_mismatch_reports_shapes(self):
        with pytest.raises(ValueError, match=r"2x3.*length 2"):
            kernels.matvec(np.zeros((2, 3), dtype=np.float32), [1.0, 2.0])

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="non-finite"):
            kernels.matvec(np.eye(2, dtype=np.float32), [np.nan, 1.0])

    def test_pure(self):
        rng = np.random.default_rng(0)
        m = rng.standard_normal((16, 8), dtype=np.float32)
        v = rng.standard_normal(8, dtype=np.float32)
        assert np.array_equal(kernels.matvec(m, v), kernels.matvec(m, v))


class TestMaskedMatvec:
    def test_single_row(self):
        got = kernels.masked_matvec([[1.0, 2.0], [3.0, 4.0]], [1.0, 1.0], {1})
        assert got == {1: 7.0}

    def test_full_mask_equals_matvec(self):
        rng = np.random.default_rng(1)
        m = rng.standard_normal((32, 16), dtype=np.float32)
        v = rng.standard_normal(16, dtype=np.float32)
        dense = kernels.matvec(m, v)
        got = kernels.masked_matvec(m, v, range(32))
        assert [got[i] for i in range(32)] == dense.tolist()

    def test_empty_mask(self):
        assert kernels.masked_matvec([[1.0]], [1.0], set()) == {}

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="out of range"):
            kernels.masked_matvec([[1.0, 2.0]], [1.0, 1.0], {3})

    @pytest.mark.parametrize("shape", [(8, 5), (256, 64), (1024, 128)])
    def test_bit_identical_to_dense_rows(self, shape):
        rng = np.random.default_rng(sum(shape))
        m = rng.standard_normal(shape, dtype=np.float32)
        v = rng.standard_normal(shape[1], dtype=np.float32)
        dense = kernels.matvec(m, v)
        rows = np.sort(rng.choice(shape[0], size=shape[0] // 3, replace=False))
        sel = kernels.select_rows_matvec(m, v, rows)
        assert np.array_equal(sel, dense[rows])


class TestActivations:
    def test_relu(self):
        assert kernels.relu([-1.0, 0.0, 2.0]).tolist() == [0.0, 0.0, 2.0]

    def test_silu_zero(self):
        assert kernels.silu([0.0]).tolist() == [0.0]

    def test_silu_matches_definition(self):
        v = np.linspace(-4, 4, 17, dtype=np.float32)
        expected = v / (1.0 + np.exp(-v.astype(np.float64)))
        assert np.allclose(kernels.silu(v), expected, atol=1e-6)

    def test_softmax_symmetry(self):
        assert kernels.softmax([0.0, 0.0]).tolist() == [0.5, 0.5]

    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=40))
    @settings(max_examples=60, deadline=None)
    def test_softmax_is_probability_vector(self, values):
        out = kernels.softmax(np.asarray(values, dtype=np.float32))
        assert np.all(out >= 0)
        assert abs(float(out.sum()) - 1.0) <= 1e-6


class TestNorms:
    def test_layernorm_matches_textbook(self):
        rng = np.random.default_rng(2)
        v = rng.standard_normal(64).astype(np.float32)
        gain = rng.standard_normal(64).astype(np.float32)
        bias = rng.standard_normal(64).astype(np.float32)
        x = v.astype(np.float64)
        expected = (x - x.mean()) / np.sqrt(x.var() + 1e-5) * gain + bias
        assert np.allclose(kernels.layernorm(v, gain, bias), expected, atol=1e-5)

    def test_rmsnorm_matches_textbook(self):
        rng = np.random.default_rng(3)
        v = rng.standard_normal(64).astype(np.float32)
        gain = rng.standard_normal(64).astype(np.float32)
        x = v.astype(np.float64)
        expected = x / np.sqrt((x**2).mean() + 1e-5) * gain
        assert np.allclose(kernels.rmsnorm(v, gain), expected, atol=1e-5)


class TestTopFractionThreshold:
    def test_half_of_four(self):
        # k = ceil(0.5 * 4) = 2 -> threshold is the 2nd largest value
        assert kernels.top_fraction_threshold([0.9, 0.5, 0.1, 2.0], 0.5) == pytest.approx(0.9)

    def test_full_fraction_is_min(self):
        values = [3.0, -1.0, 7.0]
        assert kernels.top_fraction_threshold(values, 1.0) == -1.0

    def test_singleton(self):
        assert kernels.top_fraction_threshold([7.0], 0.3) == 7.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            kernels.top_fraction_threshold([], 0.5)

    def test_bad_fraction_rejected(self):
        with pytest.raises(ValueError, match="fraction"):
            kernels.top_fraction_threshold([1.0], 0.0)

    @given(
        st.lists(st.floats(-100, 100), min_size=1, max_size=50, unique=True),
        st.floats(0.01, 1.0),
    )
    @settings(max_examples=100, deadline=None)
    def test_keeps_exactly_k_distinct(self, values, frac):
        values32 = np.asarray(values, dtype=np.float32)
        if np.unique(values32).size != values32.size:
            return  # f32 cast collapsed a pair; the law is stated for distinct values
        t = kernels.top_fraction_threshold(values32, frac)
        k = math.ceil(frac * len(values))
        assert int((values32 >= t).sum()) == k


class TestMultiplyCounter:
    def test_counts_matvec_multiplies(self):
        m = np.ones((4, 6), dtype=np.float32)
        v = np.ones(6, dtype=np.float32)
        with kernels.MultiplyCounter() as counter:
            kernels.matvec(m, v)
            kernels.select_rows_matvec(m, v, np.array([0, 2]))
        assert counter.multiplies == 4 * 6 + 2 * 6
