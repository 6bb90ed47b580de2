import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from binfer.diffcore import RngStream, ops, value_and_grad
from binfer.harness import datasets, oracles
from binfer.nets import BNN, Architecture, GaussianLikelihood, GaussianPrior
from binfer.vi import (AlphaConfig, LowRankGaussian, MeanFieldGaussian, VIConfig, alpha_bound_estimate,
                       alpha_bound_from_logweights, elbo_minibatch_estimate, fit_vi, gaussian_kl,
                       gaussian_target, inv_softplus, lowrank_log_prob, q_from_dict, sample_q, softplus)

CORR = np.array([[2.0, 1.5], [1.5, 1.6]])


def test_softplus_inverse():
    s = np.array([1e-3, 0.5, 3.0])
    np.testing.assert_allclose(softplus(inv_softplus(s)), s, rtol=1e-12)


def test_degenerate_sigma_returns_mu():
    q = MeanFieldGaussian([1.0, -2.0], [-60.0, -60.0])
    th, _ = sample_q(q, RngStream(0), 5)
    np.testing.assert_allclose(th, np.tile(q.mu, (5, 1)), atol=1e-20)


def test_meanfield_sample_moments():
    q = MeanFieldGaussian([0.5, -1.0], inv_softplus(np.array([0.3, 2.0])))
    th, _ = sample_q(q, RngStream(1), 10 ** 5)
    assert np.all(np.abs(th.mean(0) - q.mu) < 4 * q.sigma / math.sqrt(1e5))
    assert np.all(np.abs(th.var(0) / q.variance - 1) < 0.05)


def test_reparam_gradients():
    q = MeanFieldGaussian([0.0, 0.0], [0.3, -0.7])
    eps = np.array([[0.4, -1.3]])
    _, g = value_and_grad(lambda p: ops.sum(q.t_draw(p, eps)), q.params())
    sig_prime = 1.0 / (1.0 + np.exp(-q.rho))
    np.testing.assert_allclose(g[:2], [1.0, 1.0])
    np.testing.assert_allclose(g[2:], eps[0] * sig_prime)


class TestKL:
    def test_prior_is_zero(self):
        assert gaussian_kl(MeanFieldGaussian.init(3, 1.5, sigma_scale=1.0), 1.5) == pytest.approx(0.0, abs=1e-12)

    def test_hand_value(self):
        assert gaussian_kl(MeanFieldGaussian([1.0], inv_softplus(np.array([1.0]))), 1.0) == pytest.approx(0.5)

    def test_nonnegative(self):
        rng = RngStream(2)
        for _ in range(1000):
            q = MeanFieldGaussian(rng.normal(2) * 2, rng.normal(2))
            assert gaussian_kl(q, float(rng.uniform(0.1, 3.0))) >= -1e-12

    def test_lowrank_matches_dense(self):
        rng = RngStream(3)
        q = LowRankGaussian.from_diag(rng.normal(3), rng.normal((3, 2)), rng.uniform(0.2, 1.0, 3))
        S = q.covariance()
        dense = 0.5 * (np.trace(S) / 4.0 + q.mu @ q.mu / 4.0 - 3 + 3 * math.log(4.0) - np.linalg.slogdet(S)[1])
        assert gaussian_kl(q, 2.0) == pytest.approx(dense, rel=1e-10)


class TestLowRank:
    def test_rank_zero_factor_is_meanfield(self):
        q = LowRankGaussian.from_diag([1.0, 2.0], np.zeros((2, 1)), [0.25, 4.0])
        mf = MeanFieldGaussian([1.0, 2.0], inv_softplus(np.array([0.5, 2.0])))
        x = np.array([[0.3, 1.0], [2.0, -1.0]])
        np.testing.assert_allclose(q.log_prob(x), mf.log_prob(x), rtol=1e-12)

    def test_sample_covariance(self):
        q = LowRankGaussian.from_diag([0.0, 0.0], np.array([[1.0], [1.0]]), [0.01, 0.01])
        th, _ = sample_q(q, RngStream(4), 10 ** 5)
        np.testing.assert_allclose(np.cov(th.T), [[1.01, 1.0], [1.0, 1.01]], rtol=0.05)

    @pytest.mark.parametrize("d", [2, 7, 20])
    def test_woodbury_log_density(self, d):
        rng = RngStream(d)
        mu, L, D = rng.normal(d), rng.normal((d, 3)), rng.uniform(0.1, 2.0, d)
        x = rng.normal((4, d))
        ref = multivariate_normal(mu, L @ L.T + np.diag(D)).logpdf(x)
        np.testing.assert_allclose(lowrank_log_prob(mu, L, D, x), ref, rtol=0, atol=1e-10)

    def test_dict_round_trip(self):
        q = LowRankGaussian.from_diag([0.0, 1.0], np.array([[0.5], [0.2]]), [0.3, 0.4])
        back = q_from_dict(q.to_dict())
        np.testing.assert_allclose(back.covariance(), q.covariance(), rtol=1e-12)


@pytest.fixture(scope="module")
def blr_problem():
    ds = datasets.blr(30, 2, 0.8, 1.0, 5)
    model = BNN(Architecture((2, 1)), GaussianLikelihood(0.8), GaussianPrior(1.0))
    mean, cov, log_ev = oracles.exact_blr_posterior(datasets.design_with_bias(ds.x), ds.y.ravel(), 0.8, 1.0)
    return ds, model, mean, cov, log_ev


def test_elbo_collapses_to_point_estimate(blr_problem):
    ds, model, mean, _, _ = blr_problem
    q = MeanFieldGaussian(mean, np.full(3, -40.0))
    x, y = ds.pair()
    ref = float(model.log_likelihood(mean, x, y)) - gaussian_kl(q, 1.0)
    assert elbo_minibatch_estimate(q, model, (x, y), len(x), RngStream(0)) == pytest.approx(ref, rel=1e-10)


def test_minibatch_elbo_unbiased(blr_problem):
    ds, model, mean, cov, _ = blr_problem
    q = MeanFieldGaussian(mean + 0.1, inv_softplus(np.sqrt(np.diag(cov))))
    x, y = ds.pair()
    rng = RngStream(6)
    full = np.mean([elbo_minibatch_estimate(q, model, (x, y), 30, rng) for _ in range(2000)])
    mini = []
    for _ in range(2000):
        idx = rng.choice(30, 10, replace=False)
        mini.append(elbo_minibatch_estimate(q, model, (x[idx], y[idx]), 30, rng))
    assert abs(np.mean(mini) - full) / abs(full) < 0.01


def test_elbo_below_evidence(blr_problem):
    ds, model, mean, cov, log_ev = blr_problem
    rng = RngStream(7)
    x, y = ds.pair()
    for shift in (0.0, 0.2, 1.0):
        for scale in (0.5, 1.0, 2.0):
            q = MeanFieldGaussian(mean + shift, inv_softplus(scale * np.sqrt(np.diag(cov))))
            est = np.mean([elbo_minibatch_estimate(q, model, (x, y), 30, rng, 50) for _ in range(20)])
            assert est <= log_ev


class TestAlphaBound:
    target = gaussian_target(np.zeros(2), CORR)
    q = MeanFieldGaussian([0.2, -0.1], [0.1, 0.3])

    def test_single_sample_is_log_weight(self):
        eps = RngStream(0).normal((1, 2))
        vals = [alpha_bound_estimate(self.q, self.target, None, a, None, eps=eps) for a in (0.01, 0.5, 0.9)]
        np.testing.assert_allclose(vals, vals[0], rtol=1e-12)

    def test_continuity_at_one(self):
        eps = RngStream(1).normal((50, 2))
        near = alpha_bound_estimate(self.q, self.target, None, AlphaConfig(0.9999, 50), None, eps=eps)
        th = np.asarray(self.q.t_draw(self.q.params(), eps))
        w = np.asarray(self.target.log_density(th)) - self.q.log_prob(th)
        assert abs(near - float(alpha_bound_from_logweights(w, 1.0))) < 1e-3

    def test_monotone_in_alpha(self):
        eps = RngStream(2).normal((40, 2))
        vals = [alpha_bound_estimate(self.q, self.target, None, AlphaConfig(a, 40), None, eps=eps)
                for a in (0.01, 0.2, 0.5, 0.8, 0.99)]
        assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))

    def test_alpha_one_rejected(self):
        with pytest.raises(ValueError):
            AlphaConfig(1.0)


def _fit(objective, alpha=1.0, m=10, seed=0, a0=0.5, steps=3000):
    cfg = VIConfig(objective=objective, alpha=alpha, mc_samples=m, steps=steps, gradient="dreg",
                   schedule={"kind": "polynomial", "a": a0 * 50 ** 0.6, "b": 50.0, "gamma": 0.6},
                   average_tail=0.5, sigma_scale=1.0, tau=1.0, init_mu_scale=0.0)
    return fit_vi(cfg, gaussian_target(np.zeros(2), CORR), None, RngStream(seed)).q


def test_exclusive_kl_fixed_point():
    q = _fit("elbo")
    np.testing.assert_allclose(q.variance, oracles.mf_fixed_point_oracle(CORR), rtol=0.02)
    assert np.all(np.abs(q.mu) < 0.02)


def test_alpha_half_between_limits():
    q = _fit("alpha", 0.5, 200, a0=1.0)
    v_excl = oracles.mf_fixed_point_oracle(CORR)
    assert np.all(q.variance > v_excl) and np.all(q.variance < np.diag(CORR))
    assert np.all(np.abs(q.mu) < 0.02)


def test_reparam_elbo_also_converges():
    cfg = VIConfig(objective="elbo", mc_samples=10, steps=3000,
                   schedule={"kind": "polynomial", "a": 0.5 * 50 ** 0.6, "b": 50.0, "gamma": 0.6},
                   average_tail=0.5, sigma_scale=1.0, init_mu_scale=0.0)
    q = fit_vi(cfg, gaussian_target(np.zeros(2), CORR), None, RngStream(3)).q
    np.testing.assert_allclose(q.variance, [0.59375, 0.475], rtol=0.05)


def test_lowrank_fits_full_covariance():
    cfg = VIConfig(family="lowrank", rank=1, objective="elbo", mc_samples=10, steps=3000, gradient="dreg",
                   schedule={"kind": "polynomial", "a": 0.3 * 50 ** 0.6, "b": 50.0, "gamma": 0.6},
                   average_tail=0.5, sigma_scale=1.0, init_mu_scale=0.0)
    q = fit_vi(cfg, gaussian_target(np.zeros(2), CORR), None, RngStream(4)).q
    np.testing.assert_allclose(q.covariance(), CORR, rtol=0.1, atol=0.1)


def test_config_validation():
    with pytest.raises(ValueError):
        VIConfig(family="full")
    with pytest.raises(ValueError):
        VIConfig(objective="alpha", alpha=1.0)
    with pytest.raises(ValueError):
        VIConfig(gradient="score")
