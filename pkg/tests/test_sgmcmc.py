import numpy as np
import pytest

from binfer.diffcore import RngStream
from binfer.harness import datasets, oracles
from binfer.nets import BNN, Architecture, GaussianLikelihood, GaussianPrior
from binfer.sgmcmc import (ConstantSchedule, CyclicalSchedule, DivergenceError, PolynomialSchedule,
                           SamplerConfig, SGHMCConfig, SGHMCState, check_state, run_chain,
                           schedule_from_dict, sghmc_step, sgld_step)


class TestSchedules:
    def test_cyclical_golden(self):
        s = CyclicalSchedule(0.1, 2, 100)
        assert s(1) == pytest.approx(0.1, abs=1e-15)
        assert s(26) == pytest.approx(0.05, abs=1e-15)
        assert s(51) == pytest.approx(0.1, abs=1e-15)
        with pytest.raises(ValueError):
            s(101)

    def test_polynomial(self):
        s = PolynomialSchedule(1.0, 9.0, 1.0)
        assert s(1) == pytest.approx(0.1)
        for bad in (0.5, 1.2):
            with pytest.raises(ValueError):
                PolynomialSchedule(1.0, 0.0, bad)

    def test_constant_and_dict_round_trip(self):
        for s in (ConstantSchedule(0.3), PolynomialSchedule(2.0, 1.0, 0.7), CyclicalSchedule(0.2, 3, 30)):
            assert schedule_from_dict(s.to_dict()) == s
        with pytest.raises(ValueError):
            schedule_from_dict({"kind": "step"})
        with pytest.raises(ValueError):
            ConstantSchedule(0.0)


def test_sgld_fixed_point():
    th = np.array([1.0, -2.0])
    np.testing.assert_array_equal(sgld_step(th, np.zeros(2), 0.1, eps=np.zeros(2)), th)


def test_sgld_drift_linear_in_alpha():
    th, g = np.array([0.5]), np.array([2.0])
    d = [abs(sgld_step(th, g, a, eps=np.zeros(1)) - th)[0] for a in (1e-2, 1e-3, 1e-4)]
    assert d[0] / d[1] == pytest.approx(10.0) and d[1] / d[2] == pytest.approx(10.0)


def test_sgld_rejects_bad_input():
    with pytest.raises(ValueError):
        sgld_step(np.zeros(1), np.zeros(1), 0.0, eps=np.zeros(1))
    with pytest.raises(FloatingPointError):
        sgld_step(np.zeros(1), np.array([np.nan]), 0.1, eps=np.zeros(1))


def test_sghmc_frictionless_drift():
    s = SGHMCState(np.array([1.0, 2.0]), np.array([0.5, -1.0]))
    out = sghmc_step(s, np.zeros(2), SGHMCConfig(1.0, 2.0), 0.1, eps=np.zeros(2), friction=0.0)
    np.testing.assert_allclose(out.theta, [1.0 + 0.1 * 0.25, 2.0 - 0.1 * 0.5])
    np.testing.assert_array_equal(out.momentum, s.momentum)


def test_sghmc_friction_contracts():
    s = SGHMCState(np.zeros(3), np.array([1.0, -2.0, 0.5]))
    cfg = SGHMCConfig(3.0, 2.0)
    for _ in range(4):
        new = sghmc_step(s, np.zeros(3), cfg, 0.1, eps=np.zeros(3))
        np.testing.assert_allclose(np.linalg.norm(new.momentum), np.linalg.norm(s.momentum) * (1 - 0.1 * 3 / 2))
        s = new


def _gauss_grad(th, idx):
    return 0.5 * float(th @ th), th


def _stationary(kind, **kw):
    # 200 independent coordinates of a standard normal share one run
    model = BNN(Architecture((1, 1)), GaussianLikelihood(1.0))
    empty = (np.zeros((0, 1)), np.zeros((0, 1)))
    chain = run_chain(model, empty, SamplerConfig(kind, thin=50, **kw), ConstantSchedule(1e-3), 200_000,
                      RngStream(0), theta0=np.zeros(200), energy_grad=_gauss_grad)
    return chain.samples.ravel()


@pytest.mark.slow
def test_sgld_stationary_moments():
    s = _stationary("sgld")
    assert abs(s.mean()) < 0.03
    assert abs(s.var() - 1.0) < 0.05


@pytest.mark.slow
def test_sghmc_stationary_moments():
    s = _stationary("sghmc", friction=1.0, mass=1.0)
    assert abs(s.var() - 1.0) < 0.07


def test_zero_data_recovers_prior():
    # 21 prior coordinates pooled; moments within 5% of N(0, 4)
    model = BNN(Architecture((20, 1)), GaussianLikelihood(1.0), GaussianPrior(2.0))
    empty = (np.zeros((0, 20)), np.zeros((0, 1)))
    ch = run_chain(model, empty, SamplerConfig("sgld", thin=10), ConstantSchedule(0.02), 50_000, RngStream(1))
    assert abs(ch.samples.var() / 4.0 - 1.0) < 0.05
    assert abs(ch.samples.mean()) < 0.05 * 2.0


def test_blr_chain_matches_posterior():
    ds = datasets.blr(50, 2, 1.0, 1.0, 3)
    model = BNN(Architecture((2, 1)), GaussianLikelihood(1.0), GaussianPrior(1.0))
    mean, cov, _ = oracles.exact_blr_posterior(datasets.design_with_bias(ds.x), ds.y.ravel(), 1.0, 1.0)
    ch = run_chain(model, ds.pair(), SamplerConfig("sgld", batch_size=25, thin=5), ConstantSchedule(5e-4),
                   100_000, RngStream(2))
    assert np.linalg.norm(ch.mean() - mean) / np.linalg.norm(mean) < 0.02
    assert np.linalg.norm(ch.cov() - cov) / np.linalg.norm(cov) < 0.10


def test_chain_bookkeeping_and_replay():
    model = BNN(Architecture((1, 1)), GaussianLikelihood(1.0))
    ds = datasets.regression_1d(20, 0.1, 0)
    cfg = SamplerConfig("sghmc", batch_size=5, burn_in=10, thin=3)
    a = run_chain(model, ds.pair(), cfg, ConstantSchedule(1e-3), 40, RngStream(5))
    b = run_chain(model, ds.pair(), cfg, ConstantSchedule(1e-3), 40, RngStream(5))
    np.testing.assert_array_equal(a.samples, b.samples)
    assert list(a.step_indices) == list(range(10, 41, 3))
    assert a.energies.shape == (40,)


def test_cyclical_collects_near_cycle_end():
    model = BNN(Architecture((1, 1)), GaussianLikelihood(1.0))
    ds = datasets.regression_1d(10, 0.1, 0)
    sched = CyclicalSchedule(1e-3, 2, 100)
    ch = run_chain(model, ds.pair(), SamplerConfig("sgld", burn_in=0, thin=1), sched, 100, RngStream(0))
    assert len(ch) > 0
    assert all(sched(int(t)) < 0.1 * 1e-3 for t in ch.step_indices)


def test_divergence_detected():
    with pytest.raises(DivergenceError):
        check_state(np.array([np.inf]), 3)
    model = BNN(Architecture((1, 1)), GaussianLikelihood(0.01))
    ds = datasets.regression_1d(50, 0.1, 0)
    with pytest.raises((DivergenceError, FloatingPointError)):
        run_chain(model, ds.pair(), SamplerConfig("sgld"), ConstantSchedule(10.0), 200, RngStream(0))
