import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from nst.tensor import bilinear_resize, matmul, row_l2_normalize

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


class TestMatmul:
    def test_identity(self):
        np.testing.assert_array_equal(matmul([[1, 0], [0, 1]], [[5, 6], [7, 8]]), [[5, 6], [7, 8]])

    def test_inner_product(self):
        np.testing.assert_array_equal(matmul([[1, 2]], [[3], [4]]), [[11]])

    def test_matches_triple_loop(self, rng):
        a = rng.normal(size=(7, 5))
        b = rng.normal(size=(5, 3))
        ref = np.zeros((7, 3))
        for i in range(7):
            for j in range(3):
                for k in range(5):
                    ref[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(matmul(a, b), ref, atol=1e-12, rtol=0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    @given(arrays(np.float64, (4, 3), elements=finite))
    def test_identity_exact(self, a):
        np.testing.assert_array_equal(matmul(np.eye(4), a), a)
        np.testing.assert_array_equal(matmul(a, np.eye(3)), a)

    def test_repeatable(self, rng):
        a = rng.normal(size=(20, 30))
        b = rng.normal(size=(30, 10))
        assert matmul(a, b).tobytes() == matmul(a.copy(), b.copy()).tobytes()


class TestRowNormalize:
    def test_pythagorean(self):
        np.testing.assert_allclose(row_l2_normalize([[3.0, 4.0]]), [[0.6, 0.8]], atol=1e-15)

    def test_zero_row(self):
        np.testing.assert_array_equal(row_l2_normalize([[0.0, 0.0]]), [[0.0, 0.0]])

    def test_below_epsilon_is_zero(self):
        np.testing.assert_array_equal(row_l2_normalize([[1e-13, 0.0], [1.0, 0.0]]), [[0.0, 0.0], [1.0, 0.0]])

    @given(arrays(np.float64, (5, 4), elements=finite))
    def test_unit_rows_and_idempotent(self, f):
        n = row_l2_normalize(f)
        norms = np.linalg.norm(n, axis=1)
        nonzero = np.linalg.norm(f, axis=1) >= 1e-12
        np.testing.assert_allclose(norms[nonzero], 1.0, atol=1e-12)
        np.testing.assert_allclose(row_l2_normalize(n), n, atol=1e-12)


def center_formula(x, out_h, out_w):
    """Scalar evaluation of align-corners-false bilinear sampling."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, out_h, out_w))

    def src(i, n_in, n_out):
        s = (i + 0.5) * n_in / n_out - 0.5
        s = min(max(s, 0.0), n_in - 1)
        i0 = int(np.floor(s))
        return i0, min(i0 + 1, n_in - 1), s - i0

    for b in range(n):
        for ch in range(c):
            for p in range(out_h):
                y0, y1, fy = src(p, h, out_h)
                for q in range(out_w):
                    x0, x1, fx = src(q, w, out_w)
                    top = (1 - fx) * x[b, ch, y0, x0] + fx * x[b, ch, y0, x1]
                    bot = (1 - fx) * x[b, ch, y1, x0] + fx * x[b, ch, y1, x1]
                    out[b, ch, p, q] = (1 - fy) * top + fy * bot
    return out


class TestBilinearResize:
    def test_same_size_identity(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        np.testing.assert_array_equal(bilinear_resize(x, 4, 5), x)

    def test_constant_field(self):
        out = bilinear_resize(np.full((1, 1, 1, 1), 2.5), 3, 3)
        np.testing.assert_array_equal(out, np.full((1, 1, 3, 3), 2.5))

    def test_ramp_upsample(self):
        x = np.array([[[[0.0, 1.0], [2.0, 3.0]]]])
        expected = np.array([
            [0.0, 0.25, 0.75, 1.0],
            [0.5, 0.75, 1.25, 1.5],
            [1.5, 1.75, 2.25, 2.5],
            [2.0, 2.25, 2.75, 3.0],
        ])
        out = bilinear_resize(x, 4, 4)
        np.testing.assert_allclose(out[0, 0], expected, atol=1e-15)
        np.testing.assert_allclose(out, center_formula(x, 4, 4), atol=1e-14)

    @pytest.mark.parametrize("shape,out", [((1, 2, 5, 3), (2, 7)), ((2, 1, 4, 4), (2, 2)), ((1, 1, 3, 6), (5, 1))])
    def test_matches_center_formula(self, rng, shape, out):
        x = rng.normal(size=shape)
        np.testing.assert_allclose(bilinear_resize(x, *out), center_formula(x, *out), atol=1e-13)

    @settings(max_examples=50)
    @given(arrays(np.float64, (1, 2, 3, 4), elements=finite), st.integers(1, 8), st.integers(1, 8))
    def test_range_preserved(self, x, oh, ow):
        out = bilinear_resize(x, oh, ow)
        assert out.min() >= x.min() - 1e-9 * (1 + abs(x.min()))
        assert out.max() <= x.max() + 1e-9 * (1 + abs(x.max()))

    def test_rejects_bad_size(self):
        with pytest.raises(ValueError):
            bilinear_resize(np.zeros((1, 1, 2, 2)), 0, 2)
