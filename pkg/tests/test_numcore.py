import numpy as np
import pytest
from scipy.stats import kstest

from dlbsde.numcore import (
    RngStream,
    ShapeError,
    frobenius_norm,
    matmul,
    sample_standard_normals,
    sample_standard_normals_block,
    sample_uniforms,
)


def _triple_loop_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(np.eye(2), a), a)

    def test_hand_inner_product(self):
        out = matmul([[1.0, 2.0]], [[3.0], [4.0]])
        assert out.shape == (1, 1)
        assert out[0, 0] == 11.0

    def test_against_triple_loop(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((5, 7))
        b = rng.standard_normal((7, 3))
        assert np.max(np.abs(matmul(a, b) - _triple_loop_matmul(a, b))) < 1e-12

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_associativity(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            a = rng.standard_normal((4, 6))
            b = rng.standard_normal((6, 5))
            c = rng.standard_normal((5, 3))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            rel = frobenius_norm(left - right) / frobenius_norm(left)
            assert rel < 1e-10

    def test_double_transpose_exact(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((6, 4))
        assert np.array_equal(a.T.T, a)


class TestFrobenius:
    def test_zero(self):
        assert frobenius_norm(np.zeros((3, 5))) == 0.0

    def test_three_four_five(self):
        assert frobenius_norm([[3.0, 4.0]]) == 5.0

    def test_all_ones(self):
        assert frobenius_norm([[1.0, 1.0], [1.0, 1.0]]) == 2.0


class TestRngStream:
    def test_empty_draw(self):
        assert sample_standard_normals(RngStream(1), 0).shape == (0,)

    def test_sampling_is_pure(self):
        s = RngStream(seed=42, stream_id=9, counter=5)
        a = sample_standard_normals(s, 100)
        b = sample_standard_normals(s, 100)
        assert np.array_equal(a, b)

    def test_counter_shifts_sequence(self):
        s = RngStream(seed=42)
        full = sample_standard_normals(s, 20)
        tail = sample_standard_normals(s.advanced(5), 15)
        assert np.array_equal(full[5:], tail)

    def test_children_differ(self):
        s = RngStream(seed=0)
        a = sample_standard_normals(s.child("a"), 50)
        b = sample_standard_normals(s.child("b"), 50)
        assert not np.array_equal(a, b)

    def test_child_labels_accept_ints_and_strings(self):
        s = RngStream(seed=0)
        assert s.child("x", 3) == s.child("x").child(3)
        with pytest.raises(TypeError):
            s.child(1.5)

    def test_block_matches_scalar_children(self):
        s = RngStream(seed=123).child("paths")
        ids = np.array([0, 1, 5, 17])
        block = sample_standard_normals_block(s, ids, 9)
        for row, i in enumerate(ids):
            assert np.array_equal(block[row], sample_standard_normals(s.child(int(i)), 9))

    def test_uniforms_in_open_interval(self):
        u = sample_uniforms(RngStream(5), 10_000)
        assert u.min() > 0.0 and u.max() < 1.0

    def test_moments(self):
        x = sample_standard_normals(RngStream(2024).child("moments"), 1_000_000)
        assert abs(x.mean()) < 4e-3
        assert abs(x.var() - 1.0) < 1e-2
        # fourth moment within 3 standard errors of 3 (var of X^4 is 96)
        se = np.sqrt(96.0 / x.size)
        assert abs(np.mean(x**4) - 3.0) < 3 * se

    def test_kolmogorov_smirnov(self):
        x = sample_standard_normals(RngStream(77).child("ks"), 100_000)
        stat = kstest(x, "norm").statistic
        critical_1pct = 1.6276 / np.sqrt(x.size)
        assert stat < critical_1pct

    def test_negative_count_rejected(self):
        with pytest.raises(ValueError):
            sample_uniforms(RngStream(0), -1)
