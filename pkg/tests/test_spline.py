import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from btm.errors import ConfigError, DomainError
from btm.spline import (SENTINEL, BoundaryMode, KnotSequence, basis_argmax, basis_deriv,
                        basis_deriv_matrix, basis_eval, basis_matrix, basis_polynomials,
                        build_knots_mcpr, build_knots_tfr)


def textbook_basis(t, i, k, x):
    """Plain recursive Cox-de Boor, half-open intervals, 0/0 := 0."""
    if k == 0:
        return 1.0 if t[i] <= x < t[i + 1] else 0.0
    out = 0.0
    if t[i + k] != t[i]:
        out += (x - t[i]) / (t[i + k] - t[i]) * textbook_basis(t, i, k - 1, x)
    if t[i + k + 1] != t[i + 1]:
        out += (t[i + k + 1] - x) / (t[i + k + 1] - t[i + 1]) * textbook_basis(t, i + 1, k - 1, x)
    return out


class TestKnots:
    def test_mcpr_k5(self):
        ks = build_knots_mcpr(5, 2)
        np.testing.assert_allclose(ks.interior_knots, [0, 1 / 3, 2 / 3, 1, 1000])
        assert ks.boundary_mode is BoundaryMode.LAST_KNOT_UNBOUNDED

    def test_mcpr_k3_k7(self):
        assert build_knots_mcpr(3, 2).interior_knots == (0.0, 1.0, SENTINEL)
        np.testing.assert_allclose(build_knots_mcpr(7, 2).interior_knots,
                                   [0, 0.2, 0.4, 0.6, 0.8, 1, 1000])

    def test_tfr(self):
        np.testing.assert_allclose(build_knots_tfr(7, 2).interior_knots,
                                   [-1000, 0, 0.2, 0.4, 0.6, 0.8, 1])
        assert build_knots_tfr(3, 2).interior_knots == (-SENTINEL, 0.0, 1.0)
        np.testing.assert_allclose(build_knots_tfr(5, 2).interior_knots, [-1000, 0, 1 / 3, 2 / 3, 1])

    def test_extended_length_and_count(self):
        for K in (3, 5, 7):
            for d in (1, 2, 3):
                ks = build_knots_mcpr(K, d)
                assert len(ks.extended) == K + 2 * d
                assert ks.n_basis == K + d - 1

    @pytest.mark.parametrize("K,d", [(2, 2), (5, 0), (1, 1)])
    def test_bad_knot_args(self, K, d):
        with pytest.raises(ConfigError):
            build_knots_mcpr(K, d)

    def test_unsorted_knots(self):
        with pytest.raises(ConfigError):
            KnotSequence((0.0, 0.5, 0.5, 1.0), 2)


class TestBasis:
    def test_degree0_example(self):
        ks = KnotSequence((0, 0.25, 0.5, 0.75, 1), 0)
        np.testing.assert_array_equal(basis_eval(ks, 0.1), [1, 0, 0, 0])

    def test_quadratic_two_intervals_frozen(self):
        # exact rationals (1/4, 5/8, 1/8, 0) from hand evaluation at x = 1/4
        ks = KnotSequence((0, 0.5, 1), 2)
        np.testing.assert_allclose(basis_eval(ks, 0.25), [0.25, 0.625, 0.125, 0.0], atol=1e-15)

    def test_matches_textbook(self):
        rng = np.random.default_rng(3)
        for ks in (KnotSequence((0, 0.5, 1), 2), build_knots_mcpr(5, 3), build_knots_tfr(7, 2)):
            t = ks.extended
            for x in rng.uniform(0, 1, 20):
                ref = [textbook_basis(t, j, ks.degree, x) for j in range(ks.n_basis)]
                np.testing.assert_allclose(basis_eval(ks, x), ref, atol=1e-12)

    def test_right_endpoint_closed(self):
        ks = KnotSequence((0, 0.5, 1), 2)
        v = basis_eval(ks, 1.0)
        np.testing.assert_allclose(v, [0, 0, 0, 1])

    def test_domain(self):
        ks = build_knots_mcpr(5, 2)
        with pytest.raises(DomainError):
            basis_eval(ks, -0.01)
        with pytest.raises(DomainError):
            basis_eval(ks, 1000.5)
        with pytest.raises(DomainError):
            basis_deriv(ks, float("nan"))

    def test_local_support(self):
        ks = build_knots_mcpr(7, 2)
        x = np.linspace(0, 1.5, 301)
        B = basis_matrix(ks, x)
        for j in range(ks.n_basis):
            lo, hi = ks.support(j)
            outside = (x < lo) | (x > hi)
            assert np.all(B[outside, j] == 0.0)

    @pytest.mark.parametrize("d", [2, 3])
    def test_continuity_at_knots(self, d):
        ks = build_knots_mcpr(5, d)
        for k in ks.interior_knots[1:-1]:
            gap = np.abs(basis_eval(ks, k + 1e-8) - basis_eval(ks, k - 1e-8))
            assert gap.max() < 1e-6

    def test_derivative_sums_to_zero(self):
        ks = build_knots_mcpr(5, 2)
        x = np.linspace(0.01, 0.99, 50)
        np.testing.assert_allclose(basis_deriv_matrix(ks, x).sum(axis=-1), 0.0, atol=1e-12)

    def test_degree0_derivative(self):
        ks = KnotSequence((0, 0.25, 0.5, 0.75, 1), 0)
        np.testing.assert_array_equal(basis_deriv(ks, 0.3), np.zeros(4))

    def test_derivative_vs_differences(self):
        rng = np.random.default_rng(11)
        ks = build_knots_mcpr(7, 2)
        for x in rng.uniform(0.001, 0.999, 100):
            h = 1e-6
            fd = (basis_eval(ks, x + h) - basis_eval(ks, x - h)) / (2 * h)
            np.testing.assert_allclose(basis_deriv(ks, x), fd, atol=1e-6)

    def test_argmax(self):
        ks = KnotSequence((0, 0.5, 1), 2)
        # middle quadratic basis on knots (0, 0, .5, 1) peaks at 1/3
        assert basis_argmax(ks, 1) == pytest.approx(1 / 3, abs=1e-8)
        assert basis_argmax(ks, 0) == pytest.approx(0.0, abs=1e-12)

    def test_polynomial_table_reproduces_basis(self):
        ks = build_knots_mcpr(5, 3)
        breaks, poly = basis_polynomials(ks)
        rng = np.random.default_rng(0)
        for x in np.concatenate([rng.uniform(0, 1, 40), rng.uniform(1, 1000, 10)]):
            i = min(np.searchsorted(breaks, x, side="right") - 1, len(breaks) - 2)
            s = (x - breaks[i]) / (breaks[i + 1] - breaks[i])
            vals = poly[i] @ (s ** np.arange(ks.degree + 1))
            np.testing.assert_allclose(vals, basis_eval(ks, x), atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(K=st.sampled_from([3, 5, 7]), d=st.integers(1, 3), x=st.floats(0.0, 1.0))
def test_partition_and_nonnegativity_property(K, d, x):
    for ks in (build_knots_mcpr(K, d), build_knots_tfr(K, d)):
        v = basis_eval(ks, x)
        assert v.min() >= 0.0
        assert abs(v.sum() - 1.0) < 1e-12
