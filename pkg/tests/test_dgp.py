import math

import numpy as np
import pytest
from scipy import stats

from quadmed.dgp import (N_MC_FLOOR, DgpSpec, fixture_theta, g_tilde, generate, load_fixtures,
                         oracle_theta, s3_mediator_prob, truncated_normal,
                         truncated_normal_variance)
from quadmed.estimators import eif_score


def test_g_tilde_values():
    assert g_tilde(0.0) == pytest.approx(0.1 / 0.7)
    assert g_tilde(math.pi) == pytest.approx((0.1 + math.pi) / (0.7 + math.pi))
    assert g_tilde(math.pi) == pytest.approx(0.84380, abs=5e-5)


def test_g_tilde_range_on_design():
    draw = generate(DgpSpec("S1", 1_000_000, 5, 3, seed=0))
    p = g_tilde(draw.dataset.x @ np.r_[np.ones(4), 0.0])
    assert p.min() > 0 and p.max() < 1


class TestTruncatedNormal:
    def test_moments(self):
        u = truncated_normal(-1.2, 1.2, seed=1)(1_000_000)
        assert u.min() >= -1.2 and u.max() <= 1.2
        assert abs(u.mean()) <= 0.01
        assert abs(u.var() - truncated_normal_variance(-1.2, 1.2)) <= 0.01

    def test_variance_formula(self):
        assert truncated_normal_variance(-1.2, 1.2) == pytest.approx(
            stats.truncnorm(-1.2, 1.2).var(), rel=1e-12)
        assert truncated_normal_variance(-0.5, 2.0) == pytest.approx(
            stats.truncnorm(-0.5, 2.0).var(), rel=1e-12)

    def test_bounds_order(self):
        with pytest.raises(ValueError):
            truncated_normal(1.0, -1.0)


class TestSpec:
    def test_defaults(self):
        spec = DgpSpec("S3", 10)
        assert (spec.d1, spec.d2) == (50, 1)

    @pytest.mark.parametrize("kwargs", [dict(setting="S4", n=10), dict(setting="S1", n=10, d1=3),
                                        dict(setting="S3", n=10, d2=2), dict(setting="S1", n=0),
                                        dict(setting="S2", n=10, overrides={"delta1": [1]})])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            DgpSpec(**kwargs)


class TestGenerate:
    def test_deterministic(self):
        a = generate(DgpSpec("S2", 300, 8, 4, seed=5))
        b = generate(DgpSpec("S2", 300, 8, 4, seed=5))
        assert a.dataset == b.dataset
        assert np.array_equal(a.y_cross, b.y_cross)

    def test_ex1_truth(self):
        draw = generate(DgpSpec("EX1", 1_000_000, seed=2))
        assert abs(draw.y_cross.mean() - 1) <= 0.005

    def test_s1_covariates(self):
        x = generate(DgpSpec("S1", 5000, seed=3)).dataset.x
        assert np.all(x[:, 0] == 1)
        assert np.abs(x[:, 1:]).max() <= 1.2

    def test_s3_mediator(self):
        draw = generate(DgpSpec("S3", 200_000, 4, 1, seed=4))
        ds = draw.dataset
        assert set(np.unique(ds.m)) <= {0.0, 1.0}
        p = s3_mediator_prob(ds.a, ds.x)
        se = math.sqrt(np.mean(p * (1 - p)) / ds.n)
        assert abs(ds.m.mean() - p.mean()) <= 4 * se

    def test_s3_probability_formula(self):
        # Independent transcription of the stated Bernoulli probability.
        rng = np.random.default_rng(6)
        x = np.column_stack([np.ones(20), rng.normal(size=(20, 4))])
        a = rng.integers(0, 2, 20).astype(float)
        z1, z2, z3 = x[:, 1], x[:, 2], x[:, 3]
        expected = (0.2 + 0.15 * (1 - a) * (1 + (z2 > 0))
                    + 0.3 / (1 + np.exp(-(z1 + z2 + z3))))
        assert np.allclose(s3_mediator_prob(a, x), expected)

    @pytest.mark.parametrize("setting", ["S1", "S2"])
    def test_treatment_frequency(self, setting):
        draw = generate(DgpSpec(setting, 100_000, 6, 3, seed=7))
        p = draw.truth.pi(draw.dataset.x)
        se = math.sqrt(np.mean(p * (1 - p)) / 100_000)
        assert abs(draw.dataset.a.mean() - p.mean()) <= 3 * se

    @pytest.mark.parametrize("setting,sign", [("S1", 1), ("S2", -1)])
    def test_mediator_shift_direction(self, setting, sign):
        from quadmed.dgp import _phi
        draw = generate(DgpSpec(setting, 100_000, 6, 3, seed=8))
        ds = draw.dataset
        u1 = ds.m[:, 0] - (ds.x @ _phi(6, 3))[:, 0]
        diff = u1[ds.a == 1].mean() - u1[ds.a == 0].mean()
        assert sign * diff > 0

    @pytest.mark.parametrize("setting,dims", [("S1", (6, 4)), ("S2", (6, 4)), ("S3", (5, 1)),
                                              ("EX1", (2, 1))])
    def test_truth_functions_give_unbiased_score(self, setting, dims):
        # With every nuisance at its true value the score is mean-theta.
        draw = generate(DgpSpec(setting, 400_000, *dims, seed=9))
        scores = eif_score(draw.dataset, draw.truth.pi, draw.truth.q, draw.truth.mu,
                           draw.truth.tau, eps=1e-12)
        theta = fixture_theta(setting)
        se = scores.std() / math.sqrt(len(scores))
        assert abs(scores.mean() - theta) <= 4 * se


class TestOracle:
    def test_ex1(self):
        res = oracle_theta(DgpSpec("EX1", 1), 1_000_000, seed=3)
        assert abs(res["theta"] - 1) <= 3 * res["mc_se"]

    def test_floor(self):
        with pytest.raises(ValueError):
            oracle_theta(DgpSpec("EX1", 1), N_MC_FLOOR - 1)

    def test_se_scaling(self):
        a = oracle_theta(DgpSpec("S3", 1, 4, 1), 200_000, seed=1)
        b = oracle_theta(DgpSpec("S3", 1, 4, 1), 400_000, seed=1)
        assert a["mc_se"] / b["mc_se"] == pytest.approx(math.sqrt(2), rel=0.05)

    def test_fixture_reproducible(self):
        fx = load_fixtures()["S3"]
        res = oracle_theta(DgpSpec("S3", 1, fx["d1"], fx["d2"]), fx["n_mc"], fx["seed"])
        assert res["theta"] == fx["theta"]
        assert res["mc_se"] == fx["mc_se"]

    @pytest.mark.parametrize("setting", ["S1", "S2"])
    def test_fixtures_match_analytic_theta(self, setting):
        fx = load_fixtures()[setting]
        analytic = generate(DgpSpec(setting, 1, fx["d1"], fx["d2"])).truth.theta
        assert analytic == pytest.approx(3.1)
        assert abs(fx["theta"] - analytic) <= 4 * fx["mc_se"]
