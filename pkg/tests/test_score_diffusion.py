import math

import numpy as np
import pytest

from binfer.diffcore import RngStream
from binfer.score_diffusion import (NoiseLadder, ScoreConfig, ScoreNet, SDEConfig, annealed_langevin_sample,
                                    dsm_loss, gaussian_score, ncsn_loss, pc_sample, simulate_forward,
                                    train_score, vp_analytic_score, vp_forward_marginal)


class _Exact:
    """Stands in for a net: the true score of N(0,1) data at noise sigma."""

    def forward(self, x, sigma, theta=None):
        return -x / (1.0 + np.asarray(sigma) ** 2)


def test_dsm_minimum_at_true_score():
    x = RngStream(0).normal((10 ** 6, 1))
    for sigma in (0.3, 1.0):
        got = float(dsm_loss(_Exact(), x, sigma, RngStream(1)))
        want = 0.5 / (sigma ** 2 * (1 + sigma ** 2))
        assert got == pytest.approx(want, rel=0.01)


def test_dsm_zero_score():
    net = ScoreNet.create(2, (4,), "tanh", RngStream(0))
    zero = ScoreNet(net.arch, np.zeros_like(net.params))
    x = RngStream(1).normal((10 ** 5, 2))
    assert float(dsm_loss(zero, x, 0.5, RngStream(2))) == pytest.approx(2 / (2 * 0.25), rel=0.01)


def test_dsm_nonnegative_and_validates():
    net = ScoreNet.create(1, (4,), "relu", RngStream(3))
    assert float(dsm_loss(net, np.ones((5, 1)), 0.2, RngStream(4))) >= 0.0
    with pytest.raises(ValueError):
        dsm_loss(net, np.ones((5, 1)), 0.0, RngStream(4))


def test_single_scale_ncsn_is_weighted_dsm():
    net = ScoreNet.create(1, (5,), "tanh", RngStream(5))
    x, eps = RngStream(6).normal((8, 1)), RngStream(7).normal((1, 8, 1))
    a = float(ncsn_loss(net, x, NoiseLadder((0.4,)), eps=eps))
    b = float(dsm_loss(net, x, 0.4, eps=eps[0]))
    assert a == pytest.approx(0.16 * b, rel=1e-12)


def test_ladder_validation():
    lad = NoiseLadder.geometric(1.0, 0.1, 11)
    assert len(lad) == 11 and lad.sigmas[0] == 1.0 and lad.sigmas[-1] == pytest.approx(0.1)
    with pytest.raises(ValueError):
        NoiseLadder((0.1, 0.5))
    with pytest.raises(ValueError):
        NoiseLadder(())


def test_training_loss_decreases():
    data = RngStream(0).normal((5000, 1))
    cfg = ScoreConfig(steps=1000, hidden=(32, 32), n_scales=5, lr=3e-4, batch_size=256)
    losses = train_score(cfg, data, RngStream(1)).losses
    # the weighted loss has an irreducible floor sum_i 1 / (2 (1 + sigma_i^2)) for N(0,1) data
    floor = sum(0.5 / (1 + s * s) for s in cfg.ladder().sigmas)
    excess = losses.reshape(-1, 50).mean(1) - floor
    smooth = np.convolve(excess, np.ones(4) / 4, mode="valid")
    assert smooth[-1] < 0.1 * smooth[0]
    assert np.all(np.diff(smooth) < 0.05 * smooth[0])  # rises only at the minibatch noise level


def test_zero_score_is_brownian():
    lad = NoiseLadder((1.0, 0.5, 0.2))
    x = annealed_langevin_sample(lambda x, s: np.zeros_like(x), lad, 50, 1e-3, RngStream(0),
                                 x0=np.zeros((20_000, 1)))
    total = 2 * sum(1e-3 * s ** 2 / 0.04 * 50 for s in lad.sigmas)
    assert x.var() == pytest.approx(total, rel=0.05)


def test_single_small_scale_samples_data():
    x = annealed_langevin_sample(gaussian_score(1.0), NoiseLadder((1e-3,)), 2000, 1e-2, RngStream(1),
                                 n=4000)
    assert abs(x.mean()) < 0.1 and abs(x.var() - 1.0) < 0.1


def test_annealed_with_analytic_score():
    x = annealed_langevin_sample(gaussian_score(1.0), NoiseLadder.geometric(1.0, 0.1, 11), 100, 2e-3,
                                 RngStream(2), n=4000)
    assert abs(x.mean()) < 0.1 and 0.9 < x.var() < 1.1


class TestVP:
    sde = SDEConfig()

    def test_marginal_endpoints(self):
        assert vp_forward_marginal(None, 0.0, self.sde) == (1.0, 0.0)
        m, v = vp_forward_marginal(None, 1.0, self.sde)
        assert self.sde.int_beta(1.0) == pytest.approx(10.05)
        assert m == pytest.approx(math.exp(-5.025), rel=1e-12)
        assert v == pytest.approx(1 - math.exp(-10.05), rel=1e-12)

    def test_variance_preserved(self):
        for t in np.linspace(0, 1, 11):
            m, v = vp_forward_marginal(None, float(t), self.sde)
            assert abs(m * m + v - 1.0) < 1e-12

    def test_forward_simulation_matches_marginal(self):
        x0 = 3.0 + 0.5 * RngStream(0).normal((10_000, 1))
        x = simulate_forward(x0, self.sde, 0.2, RngStream(1), n_steps=1000)
        m, v = vp_forward_marginal(None, 0.2, self.sde)
        assert x.mean() == pytest.approx(3.0 * m, rel=0.02)
        assert x.var() == pytest.approx(0.25 * m * m + v, rel=0.02)

    def test_predictor_only_recovers_data_variance(self):
        x = pc_sample(vp_analytic_score(self.sde), self.sde, RngStream(2), 5000)
        assert abs(x.var() - 1.0) < 0.1

    def test_corrector_does_not_hurt(self):
        p = pc_sample(vp_analytic_score(self.sde), self.sde, RngStream(3), 5000)
        pc = pc_sample(vp_analytic_score(self.sde), self.sde, RngStream(3), 5000, corrector_steps=1)
        assert abs(pc.var() - 1.0) <= abs(p.var() - 1.0) + 0.05

    def test_vp_training_runs(self):
        data = RngStream(4).normal((2000, 1))
        res = train_score(ScoreConfig(mode="vp", steps=50, hidden=(8,)), data, RngStream(5))
        assert np.isfinite(res.losses).all()

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SDEConfig(beta_min=5.0, beta_max=1.0)
        with pytest.raises(ValueError):
            vp_forward_marginal(None, 1.5, self.sde)
        with pytest.raises(ValueError):
            ScoreConfig(mode="edm")
