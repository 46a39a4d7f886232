import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from nst.mmd import KernelSpec, kernel_eval, mean_pairwise_sq_distance, mmd_sq, mmd_sq_normalized

from conftest import fd_grad, max_rel

SPECS = {
    "linear": KernelSpec.linear(),
    "poly": KernelSpec.poly(),
    "poly3": KernelSpec.poly(3, 1.0),
    "gaussian-fixed": KernelSpec.gaussian(1.3),
    "gaussian-adaptive": KernelSpec.gaussian(),
}


def brute_kernel(spec, a, b, sigma_sq):
    dot = sum(p * q for p, q in zip(a, b))
    if spec.family == "linear":
        return dot
    if spec.family == "poly":
        return (dot + spec.offset) ** spec.degree
    return math.exp(-sum((p - q) ** 2 for p, q in zip(a, b)) / (2 * sigma_sq))


def brute_sigma(x, y):
    pooled = [list(r) for r in x] + [list(r) for r in y]
    d = [sum((p - q) ** 2 for p, q in zip(pooled[i], pooled[j]))
         for i in range(len(pooled)) for j in range(i + 1, len(pooled))]
    return max(sum(d) / len(d), 1e-12)


def brute_mmd(spec, x, y):
    """Three double sums with 1/N^2, 1/M^2 and -2/(NM) weights, diagonals included."""
    sigma_sq = None
    if spec.family == "gaussian":
        sigma_sq = spec.sigma_sq if spec.sigma_sq is not None else brute_sigma(x, y)
    n, m = len(x), len(y)
    xx = sum(brute_kernel(spec, x[i], x[k], sigma_sq) for i in range(n) for k in range(n))
    yy = sum(brute_kernel(spec, y[j], y[k], sigma_sq) for j in range(m) for k in range(m))
    xy = sum(brute_kernel(spec, x[i], y[j], sigma_sq) for i in range(n) for j in range(m))
    return xx / n**2 + yy / m**2 - 2 * xy / (n * m)


def unit_rows(f):
    return [[v / math.sqrt(sum(u * u for u in r)) for v in r] for r in f]


class TestKernelEval:
    def test_linear_orthogonal(self):
        assert kernel_eval(KernelSpec.linear(), [1, 0], [0, 1]) == 0

    def test_poly_square(self):
        assert kernel_eval(KernelSpec.poly(2, 0), [1, 2], [3, 4]) == 121

    @pytest.mark.parametrize("s2", [0.1, 1.0, 7.0])
    def test_gaussian_self(self, s2):
        assert kernel_eval(KernelSpec.gaussian(), [0.3, -2.0], [0.3, -2.0], s2) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            kernel_eval(KernelSpec.linear(), [1, 2], [1, 2, 3])

    def test_gaussian_needs_bandwidth(self):
        with pytest.raises(ValueError):
            kernel_eval(KernelSpec.gaussian(), [1.0], [2.0])
        with pytest.raises(ValueError):
            kernel_eval(KernelSpec.gaussian(), [1.0], [2.0], -1.0)

    def test_invalid_specs(self):
        with pytest.raises(ValueError):
            KernelSpec.poly(0)
        with pytest.raises(ValueError):
            KernelSpec.gaussian(0.0)
        with pytest.raises(ValueError):
            KernelSpec("cosine")


class TestBandwidth:
    def test_single_pair(self):
        assert mean_pairwise_sq_distance([[0, 0]], [[3, 4]]) == 25

    def test_identical_rows_floor(self):
        v = [[0.7, -1.3]] * 3
        assert mean_pairwise_sq_distance(v, v) == 1e-12

    def test_three_pooled_pairs(self):
        # pairs (0,2), (0,4), (2,4): 4, 16, 4
        assert mean_pairwise_sq_distance([[0], [2]], [[4]]) == 8

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            mean_pairwise_sq_distance(np.zeros((1, 2)), np.zeros((0, 2)))


class TestMmdSq:
    @pytest.mark.parametrize("name", SPECS)
    def test_identical_sets(self, rng, name):
        x = rng.normal(size=(5, 3))
        assert abs(mmd_sq(SPECS[name], x, x.copy()).value) <= 1e-10

    def test_singletons_linear(self):
        assert mmd_sq(KernelSpec.linear(), [[1, 0]], [[0, 1]]).value == 2

    @pytest.mark.parametrize("name", SPECS)
    def test_brute_force(self, rng, name):
        x = rng.normal(size=(5, 3))
        y = rng.normal(size=(4, 3))
        spec = SPECS[name]
        assert abs(mmd_sq(spec, x, y).value - brute_mmd(spec, x.tolist(), y.tolist())) <= 1e-10

    def test_sigma_recorded(self, rng):
        x, y = rng.normal(size=(3, 2)), rng.normal(size=(2, 2))
        res = mmd_sq(KernelSpec.gaussian(), x, y)
        assert res.sigma_sq_used == pytest.approx(brute_sigma(x.tolist(), y.tolist()), rel=1e-12)
        assert mmd_sq(KernelSpec.gaussian(2.0), x, y).sigma_sq_used == 2.0
        assert mmd_sq(KernelSpec.linear(), x, y).sigma_sq_used is None

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            mmd_sq(KernelSpec.linear(), np.ones((2, 3)), np.ones((2, 4)))

    def test_grad_shape(self, rng):
        y = rng.normal(size=(4, 6))
        res = mmd_sq(KernelSpec.poly(), rng.normal(size=(3, 6)), y, True)
        assert res.grad_y.shape == y.shape
        assert mmd_sq(KernelSpec.poly(), y, y).grad_y is None

    @pytest.mark.parametrize("name", SPECS)
    def test_grad_finite_difference(self, rng, name):
        spec = SPECS[name]
        x = rng.normal(size=(4, 6))
        y = rng.normal(size=(4, 6))
        res = mmd_sq(spec, x, y, True)
        frozen = KernelSpec.gaussian(res.sigma_sq_used) if spec.family == "gaussian" else spec
        num = fd_grad(lambda: mmd_sq(frozen, x, y).value, y)
        assert max_rel(res.grad_y, num) < 1e-4

    def test_linear_closed_form(self, rng):
        for _ in range(20):
            x = rng.normal(size=(rng.integers(1, 8), 5))
            y = rng.normal(size=(rng.integers(1, 8), 5))
            diff = x.mean(axis=0) - y.mean(axis=0)
            assert abs(mmd_sq(KernelSpec.linear(), x, y).value - diff @ diff) <= 1e-12


mats = arrays(np.float64, st.tuples(st.integers(1, 6), st.just(4)), elements=st.floats(-3, 3))


class TestMmdProperties:
    @settings(max_examples=60, deadline=None)
    @given(mats, mats, st.sampled_from(sorted(SPECS)))
    def test_symmetry(self, x, y, name):
        spec = SPECS[name]
        if spec.family == "gaussian" and len(x) + len(y) < 2:
            return
        assert abs(mmd_sq(spec, x, y).value - mmd_sq(spec, y, x).value) <= 1e-12 * max(1.0, abs(mmd_sq(spec, x, y).value))

    @settings(max_examples=60, deadline=None)
    @given(mats, st.sampled_from(sorted(SPECS)))
    def test_v_statistic_zero(self, x, name):
        assert abs(mmd_sq(SPECS[name], x, x).value) <= 1e-10 * max(1.0, float(np.abs(x).max()) ** 4)

    def test_nonnegative_1000(self, rng):
        specs = [KernelSpec.linear(), KernelSpec.poly(2, 0.0), KernelSpec.poly(2, 1.5), KernelSpec.gaussian()]
        worst = 0.0
        for i in range(1000):
            spec = specs[i % len(specs)]
            x = rng.normal(size=(rng.integers(1, 6), 4))
            y = rng.normal(size=(rng.integers(1, 6), 4))
            worst = min(worst, mmd_sq(spec, x, y).value)
        assert worst >= -1e-9


class TestNormalized:
    @pytest.mark.parametrize("name", SPECS)
    def test_identical(self, rng, name):
        f = rng.normal(size=(4, 6))
        assert abs(mmd_sq_normalized(SPECS[name], f, f).value) <= 1e-10

    @pytest.mark.parametrize("alpha", [1e-3, 0.5, 7.0, 1e4])
    @pytest.mark.parametrize("name", ["linear", "poly", "gaussian-fixed"])
    def test_scale_invariance(self, rng, name, alpha):
        f = rng.normal(size=(4, 6))
        assert abs(mmd_sq_normalized(SPECS[name], f, alpha * f).value) <= 1e-10

    @pytest.mark.parametrize("name", SPECS)
    def test_brute_force_on_unit_rows(self, rng, name):
        f_t = rng.normal(size=(5, 6))
        f_s = rng.normal(size=(3, 6))
        expect = brute_mmd(SPECS[name], unit_rows(f_t.tolist()), unit_rows(f_s.tolist()))
        assert abs(mmd_sq_normalized(SPECS[name], f_t, f_s).value - expect) <= 1e-10

    def test_poly_gram_oracle(self, rng):
        f_t = rng.normal(size=(6, 8))
        f_s = rng.normal(size=(4, 8))
        ht = f_t / np.linalg.norm(f_t, axis=1, keepdims=True)
        hs = f_s / np.linalg.norm(f_s, axis=1, keepdims=True)
        g_t = ht.T @ ht / 6
        g_s = hs.T @ hs / 4
        assert abs(mmd_sq_normalized(KernelSpec.poly(), f_t, f_s).value - np.sum((g_t - g_s) ** 2)) <= 1e-9

    @pytest.mark.parametrize("name", SPECS)
    def test_grad_finite_difference(self, rng, name):
        spec = SPECS[name]
        f_t = rng.normal(size=(4, 6))
        f_s = rng.normal(size=(4, 6))
        res = mmd_sq_normalized(spec, f_t, f_s, True)
        frozen = KernelSpec.gaussian(res.sigma_sq_used) if spec.family == "gaussian" else spec
        num = fd_grad(lambda: mmd_sq_normalized(frozen, f_t, f_s).value, f_s)
        assert max_rel(res.grad_y, num) < 1e-4

    def test_zero_row_gets_zero_grad(self, rng):
        f_s = rng.normal(size=(3, 5))
        f_s[1] = 0.0
        res = mmd_sq_normalized(KernelSpec.poly(), rng.normal(size=(4, 5)), f_s, True)
        np.testing.assert_array_equal(res.grad_y[1], 0.0)
        assert np.isfinite(res.value)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            mmd_sq_normalized(KernelSpec.linear(), np.ones((2, 3)), np.ones((2, 2)))
