import math

import numpy as np
import pytest

from btm.data import TfrSeries
from btm.errors import ConfigError, DataError
from btm.spline import build_knots_tfr
from btm.tfr import TfrModel, project_step, tfr_project, tfr_propagate
from btm.transition import constrain_tfr, f_bspline_vec


def series(country, values, start=1950):
    values = np.asarray(values, dtype=float)
    years = start + 5 * np.arange(values.size)
    return TfrSeries(country, years, values, 0, values.size - 1)


def two_country():
    return [series("A", [6.5, 6.1, 5.4, 4.6, 3.9]), series("B", [7.0, 6.8, 6.2])]


def norm_scalar(x, mu, sd):
    return -0.5 * math.log(2 * math.pi) - math.log(sd) - 0.5 * ((x - mu) / sd) ** 2


class TestPropagate:
    def test_zero_transition(self):
        ks = build_knots_tfr(7, 2)
        np.testing.assert_array_equal(tfr_propagate(5.0, np.zeros(ks.n_basis), np.zeros(6), ks), 5.0)

    def test_one_step(self):
        ks = build_knots_tfr(7, 2)
        # constant coefficients sum to -0.3 wherever the bases overlap the data range
        eta = tfr_propagate(5.0, np.full(ks.n_basis, -0.3), np.zeros(2), ks)
        assert eta[1] == pytest.approx(4.7, abs=1e-12)

    def test_flat_at_one(self):
        ks = build_knots_tfr(7, 2)
        coef = constrain_tfr(np.full(2, 3.0), ks)
        eps = np.zeros(5)
        eps[1] = 1.0 - 5.0 - float(f_bspline_vec(5.0, 1.0, 5.0, coef, ks))
        eta = tfr_propagate(5.0, coef, eps, ks)
        assert eta[1] == pytest.approx(1.0)
        np.testing.assert_allclose(eta[1:], 1.0, atol=1e-12)

    def test_bad_start(self):
        ks = build_knots_tfr(7, 2)
        with pytest.raises(ConfigError):
            tfr_propagate(1.0, np.zeros(ks.n_basis), np.zeros(3), ks)


class TestDensity:
    def test_zero_residual_terms(self):
        m = TfrModel(two_country())
        p, _ = m.constrain(np.zeros(m.dim))
        r = m.residuals(p["beta_c"])
        # the likelihood is a sum of N(r, 0, 1) terms at tau = 1
        ll = m.log_likelihood(p["beta_c"], 1.0)
        assert ll == pytest.approx(sum(norm_scalar(x, 0, 1) for x in r), abs=1e-12)
        assert m.log_likelihood(p["beta_c"], 0.0) == -np.inf

    def test_hand_summed(self):
        data = two_country()
        m = TfrModel(data)
        rng = np.random.default_rng(0)
        q = m.sample_prior(rng)
        p, lj = m.constrain(q)
        ks = build_knots_tfr(7, 2)
        lp = 0.0
        for c, s in enumerate(data):
            coef = constrain_tfr(p["beta_c"][c], ks)
            v = s.phase2
            for t in range(1, v.size):
                f = float(f_bspline_vec(v[t - 1], 1.0, v[0], coef, ks))
                lp += norm_scalar(v[t] - v[t - 1] - f, 0, p["tau"])
        for j in range(m.P):
            lp += norm_scalar(p["beta_w"][j], 0, 1) + math.log(2) + norm_scalar(p["sigma_beta_c"][j], 0, 1)
            for c in range(2):
                lp += norm_scalar(p["beta_c"][c, j], p["beta_w"][j], p["sigma_beta_c"][j])
        lp += math.log(2) + norm_scalar(p["tau"], 0, 1)
        assert m.log_density(q) == pytest.approx(lp + lj, abs=1e-10)

    def test_gradient(self):
        m = TfrModel(two_country() + [series("C", [5.9, 5.0, 4.1, 3.3, 2.8, 2.4])])
        rng = np.random.default_rng(1)
        q = 0.5 * m.sample_prior(rng)
        lp, g = m(q)
        assert lp == pytest.approx(m.log_density(q), rel=1e-12)
        e = 1e-5
        fd = np.array([(m.log_density(q + e * np.eye(m.dim)[i]) - m.log_density(q - e * np.eye(m.dim)[i]))
                       / (2 * e) for i in range(m.dim)])
        assert np.max(np.abs(fd - g) / np.maximum(1, np.abs(fd))) < 1e-5

    def test_insufficient_data(self):
        with pytest.raises(DataError):
            TfrModel([series("A", [6.0]), series("B", [5.5])])
        with pytest.raises(ConfigError):
            TfrModel([series("A", [0.9, 0.8])])
        with pytest.raises(ConfigError):
            TfrModel(two_country(), K=5)

    def test_decrement_sign(self):
        m = TfrModel(two_country())
        rng = np.random.default_rng(2)
        draws = np.stack([m.sample_prior(rng) for _ in range(50)])
        coef = m.derived(draws)["coef"]
        grid = np.linspace(1.0 + 1e-9, 9.0, 2000)
        f = m.transition_curve(coef, np.array([9.0, 9.0]), grid)
        assert np.all(f <= 0.0)
        assert np.all(np.abs(m.transition_curve(coef, 9.0, [1.0])) == 0.0)


class TestProject:
    def test_zero_noise_deterministic(self):
        ks = build_knots_tfr(7, 2)
        coef = constrain_tfr(np.array([0.3, -0.2]), ks)
        eta = np.array([5.0])
        out = []
        for _ in range(5):
            f = f_bspline_vec(eta, 1.0, 6.0, coef, ks)
            eta = project_step(eta, f, 0.0, np.random.default_rng(0))
            out.append(eta[0])
        path = [5.0]
        for _ in range(5):
            path.append(path[-1] + float(f_bspline_vec(path[-1], 1.0, 6.0, coef, ks)))
        np.testing.assert_allclose(out, path[1:], atol=1e-12)

    def test_floor_and_widening(self):
        m = TfrModel(two_country())
        rng = np.random.default_rng(3)
        draws = np.stack([m.sample_prior(rng) for _ in range(300)])
        proj = tfr_project(m, draws, rng=4)
        for years, paths in proj.values():
            assert years[-1] <= 2095 < years[-1] + 5
            assert np.all(paths >= 1.0 - 1e-8)
            width = np.subtract(*np.quantile(paths, [0.975, 0.025], axis=0))
            assert width[10] >= width[1]

    def test_projection_mean_brute_force(self):
        # one country, one posterior draw; compare with a rejection-sampling simulator
        m = TfrModel([series("A", [6.0, 5.6, 5.0, 4.5])])
        q = np.zeros(m.dim)
        q[m.layout.index("beta_w")] = [0.4, -0.6]
        q[m.layout.index("log_tau")] = np.log(0.25)
        n = 10_000
        draws = np.tile(q, (n, 1))
        years, paths = tfr_project(m, draws, end_year=2020, rng=5)["A"]
        coef = m.derived(q)["coef"][0]
        tau = 0.25
        rng = np.random.default_rng(6)
        brute = np.empty((n, years.size))
        brute[:, 0] = 4.5
        for t in range(1, years.size):
            mean = brute[:, t - 1] + f_bspline_vec(brute[:, t - 1], 1.0, 6.0, coef, m.ks)
            val = mean + tau * rng.standard_normal(n)
            bad = val < 1.0
            while bad.any():
                val[bad] = mean[bad] + tau * rng.standard_normal(bad.sum())
                bad = val < 1.0
            brute[:, t] = val
        se = np.sqrt(paths.var(axis=0) / n + brute.var(axis=0) / n)
        assert np.all(np.abs(paths.mean(axis=0) - brute.mean(axis=0)) <= 4 * se + 1e-12)

    def test_end_before_data(self):
        m = TfrModel(two_country())
        with pytest.raises(ConfigError):
            tfr_project(m, np.zeros((1, m.dim)), end_year=1960)
