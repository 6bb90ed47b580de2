import math

import numpy as np
import pytest

from binfer.diffcore import RngStream
from binfer.nets import BNN, Architecture, CategoricalLikelihood, GaussianLikelihood
from binfer.predictive import PosteriorHandle, decompose_uncertainty, posterior_predictive
from binfer.sgmcmc import Chain
from binfer.vi import MeanFieldGaussian


def _chain(samples):
    samples = np.atleast_2d(samples)
    return Chain(samples, np.arange(len(samples)), 0, 1)


def test_hand_entropies():
    tot, ale, epi, mi = decompose_uncertainty([[1.0, 0.0], [0.0, 1.0]])
    assert tot == pytest.approx(math.log(2))
    assert ale == pytest.approx(0.0)
    assert epi == pytest.approx(math.log(2))
    assert mi == pytest.approx(math.log(2))


def test_identical_members_no_epistemic():
    tot, ale, epi, _ = decompose_uncertainty(np.tile([0.2, 0.5, 0.3], (6, 1)))
    assert abs(epi) < 1e-14
    assert tot == pytest.approx(ale)


def test_two_mutual_information_forms_agree():
    p = RngStream(0).random((50, 5))
    p /= p.sum(1, keepdims=True)
    tot, ale, _, mi = decompose_uncertainty(p)
    assert abs((tot - ale) - mi) < 1e-12


def test_rejects_non_stochastic_rows():
    with pytest.raises(ValueError):
        decompose_uncertainty([[0.5, 0.6]])


def test_single_member_regression():
    model = BNN(Architecture((1, 1)), GaussianLikelihood(0.5))
    s = posterior_predictive(PosteriorHandle.from_chain(_chain([2.0, 1.0])), model, [[3.0]])
    assert s.mean[0, 0] == pytest.approx(7.0)
    assert s.variance[0, 0] == pytest.approx(0.25)


def test_identical_members_variance_is_noise():
    model = BNN(Architecture((2, 1)), GaussianLikelihood(0.5))
    h = PosteriorHandle.from_chain(_chain(np.tile([0.3, -1.0, 0.2], (5, 1))))
    s = posterior_predictive(h, model, RngStream(1).normal((4, 2)))
    np.testing.assert_allclose(s.variance, 0.25)


def test_single_member_classification():
    model = BNN(Architecture((2, 3)), CategoricalLikelihood(3))
    th = RngStream(2).normal(model.dim)
    x = np.array([[0.5, -0.2]])
    s = posterior_predictive(PosteriorHandle.from_chain(_chain(th)), model, x)
    f = np.asarray(model.forward(th, x))[0]
    np.testing.assert_allclose(s.probs[0], np.exp(f) / np.exp(f).sum())
    assert abs(s.epistemic[0]) < 1e-14


def test_variational_handle():
    model = BNN(Architecture((1, 1)), GaussianLikelihood(1.0))
    q = MeanFieldGaussian([1.0, 0.0], [-50.0, -50.0])
    s = posterior_predictive(PosteriorHandle.from_q(q, 10, RngStream(3)), model, [[2.0]])
    assert s.mean[0, 0] == pytest.approx(2.0)


def test_empty_posterior_rejected():
    with pytest.raises(ValueError):
        PosteriorHandle.from_chain(Chain(np.zeros((0, 2)), np.zeros(0), 0, 1))
    with pytest.raises(ValueError):
        PosteriorHandle("mcmc")
