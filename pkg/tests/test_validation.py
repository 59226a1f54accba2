import json
from pathlib import Path

import numpy as np
import pytest

from btm.data import Observations
from btm.errors import ConfigError, SplitError
from btm.mcpr import McprModel, derive_eps
from btm.sampler import SamplerConfig
from btm.transition import logit
from btm.validation import (HoldoutPlan, SbcSetup, ValidationReport, average_reports,
                            generate_synthetic, generate_synthetic_tfr, make_hierarchy,
                            posterior_predictive, rank_statistic, reference_parameters,
                            run_holdout, sbc, split, summarize, truncnorm_draws, write_reports)

TOY = json.loads((Path(__file__).parent / "fixtures" / "validation_toy.json").read_text())


def obs_from(rows):
    c, y, v = zip(*rows)
    n = len(rows)
    return Observations(list(c), list(y), list(v), [0.02] * n, ["DHS"] * n)


class TestSplit:
    def test_random_count(self):
        obs = obs_from([("a", 1990 + i, 0.3) for i in range(10)])
        sp = split(obs, HoldoutPlan("random_20pct", seed=1))
        assert sp.validation.size == 2

    def test_partition_and_determinism(self):
        rng = np.random.default_rng(0)
        obs = obs_from([(f"c{rng.integers(5)}", 1990, 0.3) for _ in range(37)])
        plan = HoldoutPlan("random_20pct", seed=4)
        a, b = split(obs, plan, 2), split(obs, plan, 2)
        np.testing.assert_array_equal(a.validation, b.validation)
        assert set(a.train) | set(a.validation) == set(range(37))
        assert not set(a.train) & set(a.validation)
        assert a.validation.size == 7
        assert not np.array_equal(split(obs, plan, 3).validation, a.validation)

    def test_single_observation_country_excluded(self):
        # "z" has one observation; whenever it is held out it cannot be scored
        obs = obs_from([("z", 2000, 0.4)] + [("a", 1990 + i, 0.3) for i in range(9)])
        for rep in range(20):
            sp = split(obs, HoldoutPlan("random_20pct", seed=0), rep)
            if 0 in sp.validation:
                assert 0 not in sp.error
                break
        else:
            pytest.fail("country z was never held out")

    def test_after_cutoff_hand_partition(self):
        obs = obs_from([("a", 2001, 0.1), ("a", 2012, 0.2), ("a", 2015, 0.3),
                        ("b", 2011, 0.4), ("b", 2013, 0.5),
                        ("c", 2005, 0.6), ("c", 2009, 0.7),
                        ("d", 2010, 0.8), ("d", 2008, 0.9)])
        sp = split(obs, HoldoutPlan("after_cutoff", cutoff_year=2010))
        np.testing.assert_array_equal(sp.train, [0, 5, 6, 8])
        np.testing.assert_array_equal(sp.validation, [1, 2, 3, 4, 7])
        # b has no pre-cutoff data; a and d keep their latest held-out point
        np.testing.assert_array_equal(sp.error, [2, 7])

    def test_errors(self):
        with pytest.raises(SplitError):
            split(obs_from([("a", 2012, 0.3)]), HoldoutPlan("after_cutoff", cutoff_year=2010))
        with pytest.raises(SplitError):
            split(Observations([], [], [], [], []), HoldoutPlan("random_20pct"))
        with pytest.raises(ConfigError):
            HoldoutPlan("after_cutoff")
        with pytest.raises(ConfigError):
            HoldoutPlan("after_cutoff", cutoff_year=2031).check_grid(range(1970, 2031))


class TestSummaries:
    def test_toy_fixture(self):
        rep = summarize(TOY["pred"], TOY["y"])
        assert rep.n_eligible == 8
        assert (rep.pct_below, rep.pct_included, rep.pct_above) == (12.5, 75.0, 12.5)
        assert rep.ci_width == pytest.approx(0.19, abs=1e-12)
        assert rep.me == pytest.approx(0.01, abs=1e-12)
        assert rep.mae == pytest.approx(0.055, abs=1e-12)
        assert rep.pit_below == {5: 12.5, 10: 25.0, 25: 25.0, 50: 50.0}
        assert rep.pit_above == {50: 50.0, 75: 25.0, 90: 12.5, 95: 12.5}

    def test_ppc_half(self):
        pred = np.tile(np.linspace(0, 1, 201), (4, 1))
        rep = summarize(pred, [0.5, 0.4, 0.99, 0.001])
        assert rep.pct_included == 50.0

    def test_me_mae_example(self):
        pred = np.zeros((3, 11)) + np.array([[-0.02], [0.01], [0.03]])
        rep = summarize(pred, [0.0, 0.0, 0.0])
        assert rep.me == pytest.approx(0.01) and rep.mae == pytest.approx(0.02)

    def test_exact_medians(self):
        rng = np.random.default_rng(0)
        pred = rng.normal(0.5, 0.1, (6, 101))
        rep = summarize(pred, np.median(pred, axis=1))
        assert rep.me == 0.0 and rep.mae == 0.0

    def test_identities(self):
        rng = np.random.default_rng(1)
        rep = summarize(rng.normal(0, 1, (50, 400)), rng.normal(0.2, 1.2, 50))
        assert rep.pct_below + rep.pct_included + rep.pct_above == pytest.approx(100.0)
        assert rep.pit_below[50] + rep.pit_above[50] == pytest.approx(100.0)
        vals = list(rep.pit_below.values()) + list(rep.pit_above.values())
        assert all(0.0 <= v <= 100.0 for v in vals)
        assert list(rep.pit_below.values()) == sorted(rep.pit_below.values())

    def test_empty_not_applicable(self):
        rep = summarize(np.zeros((0, 10)), [])
        assert not rep.applicable and np.isnan(rep.me)

    def test_average(self):
        rng = np.random.default_rng(2)
        reps = [summarize(rng.normal(0, 1, (20, 100)), rng.normal(0, 1, 20)) for _ in range(5)]
        avg = average_reports(reps)
        for attr in ("pct_below", "pct_included", "ci_width", "me", "mae"):
            assert getattr(avg, attr) == pytest.approx(np.mean([getattr(r, attr) for r in reps]))
        assert avg.pit_above[75] == pytest.approx(np.mean([r.pit_above[75] for r in reps]))

    def test_write_reports(self, tmp_path):
        rep = summarize(TOY["pred"], TOY["y"], label="toy")
        write_reports(tmp_path / "v", [rep, ValidationReport(0, label="none")])
        text = (tmp_path / "v.csv").read_text().splitlines()
        assert text[0].startswith("label,n_eligible,pct_below")
        assert text[1].startswith("toy,8,12.5,75,12.5,19,1,5.5,")
        data = json.loads((tmp_path / "v.json").read_text())
        assert data[1]["applicable"] is False


class TestPredictive:
    def setup_method(self):
        self.h = make_hierarchy(1, 1, 2)
        self.model = McprModel(self.h, sources=["DHS", "MICS"])

    def test_degenerate_noise(self):
        rng = np.random.default_rng(3)
        eta = rng.uniform(0.1, 0.9, (50, 2, self.model.T))
        obs = Observations([self.h.countries[1]], [2000], [0.3], [0.0], ["MICS"])
        pred, keep = posterior_predictive(self.model, eta, np.zeros((50, 2)), obs, 0)
        np.testing.assert_array_equal(pred[0], eta[:, 1, 30])
        assert keep.all()

    def test_sd_oracle(self):
        n = 20000
        eta = np.full((n, 2, self.model.T), 0.5)
        sd_d = np.tile([0.02, 0.05], (n, 1))
        obs = Observations([self.h.countries[0]], [1990], [0.4], [0.03], ["MICS"])
        pred, _ = posterior_predictive(self.model, eta, sd_d, obs, 1)
        expected = np.hypot(0.03, 0.05)
        # Monte-Carlo standard error of an SD estimate is about sd / sqrt(2n)
        assert abs(pred.std() - expected) < 4 * expected / np.sqrt(2 * n)
        q = np.quantile(pred, [0.1, 0.5, 0.9])
        assert np.all(np.diff(q) > 0)

    def test_unknown_country_skipped(self):
        eta = np.full((5, 2, self.model.T), 0.5)
        obs = Observations(["zz", self.h.countries[0]], [1990, 1990], [0.4, 0.4], [0.03, 0.03],
                           ["DHS", "DHS"])
        with pytest.warns(UserWarning):
            pred, keep = posterior_predictive(self.model, eta, np.zeros((5, 2)), obs, 0)
        assert pred.shape == (1, 5) and keep.tolist() == [False, True]

    def test_truncnorm_in_bounds(self):
        out = truncnorm_draws(np.full(1000, 0.02), 0.1, np.random.default_rng(0))
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestSynthetic:
    def test_zero_noise_and_round_trip(self):
        h = make_hierarchy(2, 1, 5)
        m = McprModel(h, sources=["DHS", "MICS"])
        q = reference_parameters(m, 0)
        obs, truth = generate_synthetic(m, 1, q_true=q, zero_noise=True)
        eta = truth["eta"]
        ci = {c: i for i, c in enumerate(h.countries)}
        for c, y, v in zip(obs.country, obs.year, obs.value):
            assert v == eta[ci[c], y - 1970]
        assert np.all((eta > 0) & (eta < 1))
        p, _ = m.constrain(q)
        back = derive_eps(logit(eta), truth["upper"], truth["coef"], m.ks, m.ref)
        np.testing.assert_allclose(back[:, 1:], p["eps"][:, 1:], atol=1e-10)

    def test_sparsity_profile(self):
        h = make_hierarchy(1, 2, 3)
        m = McprModel(h, sources=["DHS"])
        obs, _ = generate_synthetic(m, 2, n_obs=(4, 7))
        counts = [np.sum(obs.country == c) for c in h.countries]
        assert min(counts) >= 4 and max(counts) <= 7
        assert np.all((obs.value >= 0) & (obs.value <= 1))

    def test_tfr_generator(self):
        series, truth = generate_synthetic_tfr(4, 0)
        assert len(series) == 4
        for s in series:
            assert np.all(s.phase2 >= 1.0) and np.all(np.diff(s.period_start) == 5)
        assert truth["coef"].shape == (4, 8)


class TestSbc:
    def test_needs_twenty(self):
        with pytest.raises(ConfigError):
            sbc(SbcSetup(make_hierarchy(1, 1, 2)), replicates=5)

    def test_rank_range(self):
        draws = np.random.default_rng(0).normal(size=(99, 3))
        r = rank_statistic(draws, [-10.0, 0.0, 10.0])
        assert r.tolist()[0] == 0 and r.tolist()[2] == 99 and 0 <= r[1] <= 99

    def test_biased_fitter_detected(self):
        def biased(model, seed, cfg):
            rng = np.random.default_rng(seed)
            return rng.normal(1.0, 0.1, (400, model.dim)), 0.0

        setup = SbcSetup(make_hierarchy(1, 1, 2), years=(1985, 1995), n_obs=(2, 3))
        rep = sbc(setup, replicates=20, fitter=biased,
                  draw_truth=lambda model, rng: np.zeros(model.dim))
        assert np.all(rep.ranks == 0)
        assert rep.frac_pass == 0.0
        assert rep.ranks.shape == (20, len(rep.names))

    def test_divergent_replicates_flagged(self):
        def noisy(model, seed, cfg):
            rng = np.random.default_rng(seed)
            return rng.normal(size=(200, model.dim)), 0.5 if seed % 2 else 0.0

        setup = SbcSetup(make_hierarchy(1, 1, 2), years=(1985, 1995), n_obs=(2, 3))
        rep = sbc(setup, replicates=20, fitter=noisy)
        assert rep.flagged == [i for i, d in enumerate(rep.divergence_rate) if d > 0.1]
        assert rep.flagged


def test_run_holdout_smoke():
    h = make_hierarchy(1, 1, 3)
    skel = McprModel(h, sources=["DHS", "MICS"], years=(1980, 2020))
    obs, _ = generate_synthetic(skel, 5, q_true=reference_parameters(skel, 5), n_obs=(6, 8))

    def make_model(train):
        return McprModel(h, train, sources=["DHS", "MICS"], years=(1980, 2020))

    cfg = SamplerConfig(chains=1, warmup=60, samples=40, seed=2)
    rep, runs = run_holdout(make_model, obs, HoldoutPlan("random_20pct", repetitions=2), cfg, "smoke")
    assert len(runs) == 2 and rep.label == "smoke"
    assert rep.me == pytest.approx(np.mean([r.me for r in runs]))
