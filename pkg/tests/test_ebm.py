import numpy as np
import pytest

from binfer.diffcore import RngStream, ops
from binfer.ebm import (EBMConfig, EnergyModel, InitStrategy, SampleBuffer, ais_negatives, annealing_temperatures,
                        cd_gradient, initial_negatives, langevin_sample, linear_energy, quadratic_energy, train_ebm)
from binfer.harness import oracles
from binfer.nets import Architecture


def test_langevin_stationary_variance():
    x = langevin_sample(quadratic_energy(), np.zeros((500, 1)), 50_000, 1e-3, RngStream(0))
    assert abs(x.var() - 1.0) < 0.05


def test_langevin_flat_energy_no_noise():
    flat = EnergyModel(np.zeros(1), fn=lambda th, x: np.zeros(np.shape(x)[0]) + 0.0 * x[:, 0])
    x0 = np.array([[1.0], [-2.0]])
    out = langevin_sample(flat, x0, 10, 0.1, RngStream(0), eps_fn=lambda k, s: np.zeros(s))
    np.testing.assert_array_equal(out, x0)


def test_langevin_quadratic_contraction():
    x0 = np.array([[2.0, -1.0]])
    out = langevin_sample(quadratic_energy(), x0, 1, 0.1, RngStream(0), eps_fn=lambda k, s: np.zeros(s))
    np.testing.assert_allclose(out, x0 * 0.9)


def test_langevin_step_schedule_and_box():
    out = langevin_sample(quadratic_energy(), np.full((3, 1), 5.0), 5, lambda k: 0.01 * k, RngStream(1),
                          box=(-1.0, 1.0))
    assert np.all(np.abs(out) <= 1.0)
    with pytest.raises(ValueError):
        langevin_sample(quadratic_energy(), np.zeros((1, 1)), 0, 0.1, RngStream(0))


def test_matched_phases_zero_gradient():
    m = EnergyModel.mlp(Architecture((1, 8, 1)), RngStream(0))
    x = RngStream(1).normal((16, 1))
    np.testing.assert_array_equal(cd_gradient(m, x, x), np.zeros(m.params.size))


def test_linear_energy_gradient():
    pos, neg = RngStream(2).normal((10, 1)), RngStream(3).normal((12, 1)) + 1.0
    g = cd_gradient(linear_energy(0.4), pos, neg)
    assert g[0] == pytest.approx(neg.mean() - pos.mean())


def test_gaussian_family_stationary_at_true_scale():
    data = np.sqrt(2.0) * RngStream(4).normal((20_000, 1))
    grads, ses = {}, {}
    for s in (1.0, 2.0, 4.0):
        m = quadratic_energy(s)
        neg = langevin_sample(m, RngStream(5).normal((5000, 1)), 3000, 0.01, RngStream(6))
        grads[s] = cd_gradient(m, data, neg)[0]
        # dE/ds = -x^2 / (2 s^2), so the noise level follows from the x^2 sample variances
        ses[s] = np.sqrt((data ** 2).var() / len(data) + (neg ** 2).var() / len(neg)) / (2 * s * s)
    assert grads[1.0] * grads[4.0] < 0
    assert abs(grads[1.0]) > 10 * ses[1.0] and abs(grads[4.0]) > 5 * ses[4.0]
    assert abs(grads[2.0]) < 3 * ses[2.0]


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        cd_gradient(linear_energy(), np.zeros((3, 1)), np.zeros((3, 2)))


def test_buffer_fifo_and_sampling():
    buf = SampleBuffer(4, 1)
    buf.push(np.arange(6.0).reshape(-1, 1))
    assert len(buf) == 4
    s = buf.sample(4, RngStream(0))
    assert sorted(s.ravel()) == [2.0, 3.0, 4.0, 5.0]
    with pytest.raises(ValueError):
        SampleBuffer(0, 1)


def test_initial_negatives_strategies():
    pos = np.ones((5, 1))
    rng = RngStream(0)
    np.testing.assert_array_equal(initial_negatives(InitStrategy("data"), pos, None, rng, None), pos)
    noise = initial_negatives(InitStrategy("noise"), pos, (-2.0, 2.0), rng, None)
    assert noise.shape == (5, 1) and np.all(np.abs(noise) <= 2.0)
    buf = SampleBuffer(5, 1)
    buf.push(np.full((5, 1), 7.0))
    pers = initial_negatives(InitStrategy("persistent", reinit_prob=0.0), pos, (-2.0, 2.0), rng, buf)
    np.testing.assert_array_equal(pers, 7.0)
    with pytest.raises(ValueError):
        InitStrategy("replay")


def test_single_point_energy_well():
    cfg = EBMConfig(layer_sizes=(1, 16, 1), steps=200, langevin_steps=20, batch_size=32, lr=3e-3,
                    init=InitStrategy("noise"), box=(-3.0, 3.0))
    m = train_ebm(cfg, np.zeros((50, 1)), RngStream(0)).model
    e = m(np.array([[-1.0], [0.0], [1.0]]))
    assert e[1] < e[0] and e[1] < e[2]


def _mixture(n, seed):
    rng = RngStream(seed)
    return (np.where(rng.integers(0, 2, n) == 0, -2.0, 2.0) + 0.5 * rng.normal(n))[:, None]


def _mixture_tv(cfg):
    res = train_ebm(cfg, _mixture(2000, 0), RngStream(1))
    g = oracles.grid_normalize(res.model, (-6.0, 6.0), 2048)
    true = oracles.mixture_pdf_1d(g.grid, [0.5, 0.5], [-2.0, 2.0], [0.5, 0.5])
    return oracles.total_variation(g.density, true, g.spacing), res


@pytest.mark.slow
def test_mixture_density_tv_ais():
    tv, res = _mixture_tv(EBMConfig(init=InitStrategy("noise"), anneal_t0=20.0, ais=True))
    assert tv < 0.1
    assert res.metrics["neg_ess"].mean() > 16


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="plain short-run CD does not pin the relative mode mass; see decisions ledger")
@pytest.mark.parametrize("kind", ["data", "persistent"])
def test_mixture_density_tv_plain_cd(kind):
    tv, _ = _mixture_tv(EBMConfig(init=InitStrategy(kind)))
    assert tv < 0.15


def test_annealing_temperatures():
    t = annealing_temperatures(20.0, 60)
    assert t[0] == pytest.approx(20.0 ** (1 - 1 / 45))
    assert np.all(np.diff(t) <= 0) and np.all(t[44:] == 1.0)
    np.testing.assert_array_equal(annealing_temperatures(1.0, 5), np.ones(5))


def test_ais_flat_energy_has_equal_weights():
    flat = EnergyModel(np.zeros(1), fn=lambda th, x: np.zeros(np.shape(x)[0]) + 0.0 * x[:, 0])
    x0 = RngStream(0).uniform(-1.0, 1.0, (50, 1))
    _, log_w = ais_negatives(flat, x0, annealing_temperatures(10.0, 20), 0.01, RngStream(1), (-1.0, 1.0))
    np.testing.assert_array_equal(log_w, 0.0)


def test_ais_weights_correct_unequilibrated_chains():
    # a narrow well holding 0.8 of the mass and a wide one holding 0.2; short chains stay near their starts
    def fn(th, x):
        x = ops.sum(x, axis=-1)
        return ops.neg(ops.log(ops.add(ops.exp(ops.mul(ops.square(ops.add(x, 3.0)), -50.0)),
                                       ops.mul(ops.exp(ops.mul(ops.square(ops.sub(x, 3.0)), -0.5)), 0.025))))
    m = EnergyModel(np.zeros(1), fn=fn)
    want = 0.2
    x0 = RngStream(2).uniform(-6.0, 6.0, (4000, 1))
    x, log_w = ais_negatives(m, x0, annealing_temperatures(20.0, 200), 2e-4, RngStream(3), (-6.0, 6.0))
    w = np.exp(log_w - log_w.max())
    w /= w.sum()
    assert (x[:, 0] > 0).mean() > 0.4  # unweighted chains get it wrong
    assert abs(np.sum(w * (x[:, 0] > 0)) - want) < 0.05


def test_config_validation():
    with pytest.raises(ValueError):
        EBMConfig(layer_sizes=(1, 4, 2))
    with pytest.raises(ValueError):
        EBMConfig(langevin_steps=0)
    with pytest.raises(ValueError):
        EBMConfig(ais=True)  # data init has no known start density
    with pytest.raises(ValueError):
        EBMConfig(anneal_t0=0.5)
