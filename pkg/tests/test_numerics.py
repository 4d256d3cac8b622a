import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xfersv.errors import DegenerateInputError, ShapeError
from xfersv.numerics import (
    Rng,
    derive_seed,
    gram,
    l2_normalize,
    log_sum_exp,
    matmul,
    softmax,
)

from oracles import naive_log_sum_exp, naive_matmul, naive_softmax

finite_floats = st.floats(min_value=-50.0, max_value=50.0, allow_nan=False)


class TestMatmul:
    def test_identity(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(np.eye(2), x), x)

    def test_hand_case(self):
        out = matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]])
        assert np.array_equal(out, [[3.0], [7.0]])

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    @given(arrays(np.float64, (3, 4), elements=finite_floats),
           arrays(np.float64, (4, 2), elements=finite_floats))
    def test_matches_naive(self, a, b):
        assert np.allclose(matmul(a, b), naive_matmul(a, b), atol=1e-9)


class TestGram:
    def test_orthonormal_rows(self):
        assert np.array_equal(gram(np.eye(2)), np.eye(2))

    def test_hand_case(self):
        assert np.array_equal(gram([[1.0, 1.0], [1.0, 1.0]]), [[2.0, 2.0], [2.0, 2.0]])

    @given(arrays(np.float64, (5, 3), elements=finite_floats))
    def test_symmetric_bitwise(self, x):
        g = gram(x)
        assert np.array_equal(g, g.T)
        assert np.allclose(np.diag(g), np.sum(np.asarray(x) ** 2, axis=1))

    def test_empty(self):
        with pytest.raises(ShapeError):
            gram(np.zeros((0, 3)))


class TestSoftmax:
    def test_symmetry(self):
        assert np.allclose(softmax([7.0, 7.0, 7.0]), [1 / 3] * 3, atol=1e-15)

    def test_closed_form(self):
        assert np.allclose(softmax([0.0, math.log(2.0)]), [1 / 3, 2 / 3], atol=1e-15)

    def test_empty(self):
        with pytest.raises(ShapeError):
            softmax([])

    @given(arrays(np.float64, (6,), elements=finite_floats))
    def test_sums_to_one(self, v):
        assert abs(softmax(v).sum() - 1.0) < 1e-12

    @given(arrays(np.float64, (6,), elements=finite_floats),
           st.floats(min_value=-100, max_value=100))
    def test_shift_invariance(self, v, c):
        assert np.max(np.abs(softmax(v) - softmax(v + c))) < 1e-12

    @given(arrays(np.float64, (4,), elements=finite_floats))
    def test_matches_naive(self, v):
        assert np.allclose(softmax(v), naive_softmax(v), atol=1e-12)


class TestLogSumExp:
    def test_two_zeros(self):
        assert log_sum_exp([0.0, 0.0]) == pytest.approx(math.log(2.0), abs=1e-15)

    def test_single_element(self):
        assert log_sum_exp([3.25]) == 3.25

    def test_no_overflow(self):
        assert log_sum_exp([1000.0, 1000.0]) == pytest.approx(1000.0 + math.log(2.0), abs=1e-9)

    @given(arrays(np.float64, (5,), elements=finite_floats))
    def test_matches_naive_when_safe(self, v):
        assert log_sum_exp(v) == pytest.approx(naive_log_sum_exp(v), abs=1e-12)

    def test_empty(self):
        with pytest.raises(ShapeError):
            log_sum_exp([])


class TestL2Normalize:
    def test_three_four_five(self):
        assert np.allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8], atol=1e-15)

    def test_idempotent_on_unit(self):
        u = l2_normalize([1.0, 2.0, 2.0])
        assert np.allclose(l2_normalize(u), u, atol=1e-15)
        assert abs(np.linalg.norm(u) - 1.0) < 1e-12

    def test_zero_vector(self):
        with pytest.raises(DegenerateInputError):
            l2_normalize([0.0, 0.0])


class TestRng:
    @settings(deadline=None, max_examples=10)
    @given(st.integers(min_value=0, max_value=2**63 - 1))
    def test_equal_seed_equal_stream(self, seed):
        a = Rng(seed).normal(10_000)
        b = Rng(seed).normal(10_000)
        assert np.array_equal(a, b)

    def test_different_stage_different_stream(self):
        root = Rng(7)
        a = root.spawn("corpus").normal(100)
        b = root.spawn("trials").normal(100)
        assert not np.array_equal(a, b)

    def test_derive_seed_is_stable(self):
        assert derive_seed(7, "corpus") == derive_seed(7, "corpus")
        assert derive_seed(7, "corpus") != derive_seed(8, "corpus")
