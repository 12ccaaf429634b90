import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _oracles import fd_gradient, gradient_check, random_dataset, random_fixed
from quadmed.data import Dataset, RoleDegenerateError
from quadmed.losses import (LossContext, build_loss, check_role, logistic, loss_eval, loss_grad,
                            loss_per_obs_grad, safe_exp, score_gradient)


def one_obs(a, x, m=(0.0,), y=0.0):
    return Dataset([y], [float(a)], [list(x)], [list(m)], intercept_flag=False)


class TestLogistic:
    def test_values(self):
        assert logistic(0.0) == 0.5
        assert abs(logistic(30.0) - 1) <= 1e-12
        assert logistic(-1000.0) == 0.0
        assert logistic(1000.0) == 1.0

    @given(st.floats(-500, 500))
    def test_symmetry(self, u):
        assert logistic(u) == pytest.approx(1 - logistic(-u), abs=1e-15)


def test_safe_exp_continuous_extension():
    assert safe_exp(1.0) == pytest.approx(np.e)
    assert safe_exp(30.0) == pytest.approx(np.exp(30.0))
    above = safe_exp(31.0)
    assert np.isfinite(safe_exp(1e6))
    assert above == pytest.approx(np.exp(30.0) * 2)


class TestExamples:
    def test_loss1_value(self):
        ctx = LossContext(one_obs(1, (1, 2)))
        assert loss_eval(1, ctx, np.zeros(2)) == 1.0

    def test_loss2_value(self):
        ctx = LossContext(one_obs(0, (1, 2)))
        assert loss_eval(2, ctx, np.zeros(2)) == 1.0

    def test_loss4_value(self):
        ds = one_obs(1, (1,), m=(0.0,), y=3.0)
        ctx = LossContext(ds, {"pi_a": np.zeros(1), "q": np.zeros(2)})
        assert loss_eval(4, ctx, np.array([1.0, 0.0])) == pytest.approx(8.0)

    def test_loss1_grad(self):
        ctx = LossContext(one_obs(1, (1, 2)))
        assert np.allclose(loss_grad(1, ctx, np.zeros(2)), [-1, -2])

    def test_loss2_grad_is_true_derivative(self):
        # With A=1 the loss is -u, so the derivative is -X.
        ctx = LossContext(one_obs(1, (1, 2)))
        assert np.allclose(loss_grad(2, ctx, np.zeros(2)), [-1, -2])

    def test_loss5_grad_zero_without_controls(self):
        rng = np.random.default_rng(0)
        ds = random_dataset(rng)
        ds = Dataset(ds.y, np.ones(ds.n), ds.x, ds.m)
        ctx = LossContext(ds, random_fixed(rng, ds))
        assert np.array_equal(loss_grad(5, ctx, rng.normal(size=ds.d1)), np.zeros(ds.d1))


class TestContracts:
    def test_missing_fixed_block(self):
        rng = np.random.default_rng(1)
        with pytest.raises(ValueError, match="requires fixed blocks"):
            build_loss(3, LossContext(random_dataset(rng)))

    def test_bad_index(self):
        rng = np.random.default_rng(1)
        with pytest.raises(ValueError):
            build_loss(7, LossContext(random_dataset(rng)))

    def test_beta_dimension(self):
        rng = np.random.default_rng(1)
        ds = random_dataset(rng)
        with pytest.raises(ValueError):
            loss_eval(1, LossContext(ds), np.zeros(ds.d1 + 1))

    def test_role_degenerate(self):
        rng = np.random.default_rng(1)
        ds = random_dataset(rng)
        treated = Dataset(ds.y, np.ones(ds.n), ds.x, ds.m)
        with pytest.raises(RoleDegenerateError):
            check_role(5, treated)
        with pytest.raises(RoleDegenerateError):
            check_role(1, treated)
        check_role(4, treated)


@pytest.mark.parametrize("j", range(1, 7))
def test_gradient_matches_finite_differences(j):
    assert gradient_check(j, np.random.default_rng(100 + j), n_points=20) < 1e-5


@pytest.mark.parametrize("j", range(1, 7))
def test_per_obs_gradient_averages_to_gradient(j):
    rng = np.random.default_rng(j)
    ds = random_dataset(rng)
    ctx = LossContext(ds, random_fixed(rng, ds))
    beta = 0.3 * rng.normal(size=build_loss(j, ctx).dim)
    assert np.allclose(loss_per_obs_grad(j, ctx, beta).mean(axis=0), loss_grad(j, ctx, beta))


@settings(max_examples=40, deadline=None)
@given(j=st.integers(1, 6), seed=st.integers(0, 10**6))
def test_midpoint_convexity(j, seed):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, n=30)
    loss = build_loss(j, LossContext(ds, random_fixed(rng, ds)))
    u, v = rng.normal(size=(2, loss.dim))
    assert loss.value((u + v) / 2) <= (loss.value(u) + loss.value(v)) / 2 + 1e-9


@settings(max_examples=40, deadline=None)
@given(j=st.integers(4, 6), seed=st.integers(0, 10**6))
def test_weighted_squares_non_negative(j, seed):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, n=30)
    loss = build_loss(j, LossContext(ds, random_fixed(rng, ds, scale=2.0)))
    assert loss.value(3 * rng.normal(size=loss.dim)) >= 0


def test_score_gradient_matches_finite_differences():
    from quadmed.estimators import score_terms
    from quadmed.losses import BLOCKS
    rng = np.random.default_rng(3)
    ds = random_dataset(rng)
    nu = random_fixed(rng, ds)

    def mean_score(block, beta):
        cur = dict(nu, **{block: beta})
        x, s = ds.x, ds.s
        pa, pb = logistic(x @ cur["pi_a"]), logistic(x @ cur["pi_b"])
        return float(np.mean(score_terms(ds.a, ds.y, pa, pb, safe_exp(s @ cur["q"]),
                                         s @ cur["mu"], x @ cur["tau_n"], x @ cur["tau"])))

    grads = score_gradient(ds, nu)
    for b in BLOCKS:
        coords = np.arange(len(nu[b]))
        fd = fd_gradient(lambda beta: mean_score(b, beta), nu[b], coords)
        assert np.allclose(grads[b], fd, rtol=1e-6, atol=1e-8), b


def test_moment_identities_with_losses():
    # Each score-gradient block is a (signed) combination of loss gradients.
    rng = np.random.default_rng(4)
    ds = random_dataset(rng)
    nu = random_fixed(rng, ds)
    g = score_gradient(ds, nu)
    ctx = LossContext(ds, nu)
    assert np.allclose(g["tau"], loss_grad(1, ctx, nu["pi_a"]))
    assert np.allclose(g["tau_n"], -(loss_grad(1, ctx, nu["pi_a"]) + loss_grad(2, ctx, nu["pi_b"])))
    assert np.allclose(g["mu"], -loss_grad(3, ctx, nu["q"]))
    assert np.allclose(g["q"], -0.5 * loss_grad(4, ctx, nu["mu"]))
    assert np.allclose(g["pi_b"], -0.5 * loss_grad(5, ctx, nu["tau_n"]))
    assert np.allclose(g["pi_a"], 0.5 * loss_grad(6, ctx, nu["tau"]))
