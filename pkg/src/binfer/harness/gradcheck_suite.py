"""Finite-difference checks of every differentiable op and model objective."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import dlvm, ebm, score_diffusion as sd, vi
from ..diffcore import RngStream, check_gradient, ops
from ..nets import BNN, Architecture, CategoricalLikelihood, GaussianLikelihood, GaussianPrior

# each maker takes an RngStream and returns (scalar fn, point)
Maker = Callable[[RngStream], tuple]


def _proj(rng, shape):
    return rng.normal(shape)


def _unary(op, domain: str = "real"):
    def make(rng):
        x = rng.normal((3, 4))
        if domain == "positive":
            x = np.abs(x) + 0.5
        w = _proj(rng, x.shape)
        return (lambda v: ops.sum(ops.mul(op(v), w))), x
    return make


def _binary(op, safe_b: bool = False):
    def make(rng):
        a, b = rng.normal((3, 4)), rng.normal((3, 4))
        if safe_b:
            b = np.sign(b) * (np.abs(b) + 0.5)
        w = _proj(rng, a.shape)
        ab = np.concatenate([a.ravel(), b.ravel()])
        return (lambda v: ops.sum(ops.mul(op(ops.reshape(ops.getitem(v, slice(0, 12)), (3, 4)),
                                                ops.reshape(ops.getitem(v, slice(12, 24)), (3, 4))), w))), ab
    return make


def _matmul(rng):
    a, b = rng.normal((3, 4)), rng.normal((4, 2))
    w = _proj(rng, (3, 2))
    v = np.concatenate([a.ravel(), b.ravel()])
    return (lambda p: ops.sum(ops.mul(ops.matmul(ops.reshape(ops.getitem(p, slice(0, 12)), (3, 4)),
                                                 ops.reshape(ops.getitem(p, slice(12, 20)), (4, 2))), w))), v


def _affine(rng):
    x = rng.normal((5, 3))
    theta = rng.normal(3 * 2 + 2 + 1)
    w = _proj(rng, (5, 2))
    return (lambda t: ops.sum(ops.mul(ops.affine(x, t, 1, (2, 3), 7), w))), theta


def _solve(rng):
    a = rng.normal((3, 3)) + 3.0 * np.eye(3)
    b = rng.normal(3)
    w = _proj(rng, 3)
    v = np.concatenate([a.ravel(), b])
    return (lambda p: ops.sum(ops.mul(ops.solve(ops.reshape(ops.getitem(p, slice(0, 9)), (3, 3)),
                                                ops.getitem(p, slice(9, 12))), w))), v


def _logdet(rng):
    a = rng.normal((3, 3))
    return (lambda p: ops.logdet(ops.reshape(p, (3, 3)))), (a @ a.T + np.eye(3)).ravel()


def _reduction(op):
    def make(rng):
        x = rng.normal((3, 4))
        w = _proj(rng, 3)
        return (lambda v: ops.sum(ops.mul(op(v), w))), x
    return make


def _power(rng):
    x = np.abs(rng.normal((3, 4))) + 0.5
    w = _proj(rng, x.shape)
    return (lambda v: ops.sum(ops.mul(ops.power(v, 1.7), w))), x


def _clip(rng):
    x = rng.normal((3, 4))
    x = np.where(np.abs(np.abs(x) - 1.0) < 1e-3, x + 0.01, x)  # keep off the clip edges
    w = _proj(rng, x.shape)
    return (lambda v: ops.sum(ops.mul(ops.clip(v, -1.0, 1.0), w))), x


def _relu(rng):
    x = rng.normal((3, 4))
    x = np.where(np.abs(x) < 1e-3, 0.1, x)
    w = _proj(rng, x.shape)
    return (lambda v: ops.sum(ops.mul(ops.relu(v), w))), x


def _indexing(rng):
    x = rng.normal((4, 3))
    idx = rng.integers(0, 4, 6)
    w1, w2, w3 = _proj(rng, (6, 3)), _proj(rng, (2, 3)), _proj(rng, (8, 3))

    def fn(v):
        g = ops.gather(v, idx, axis=0)
        s = ops.getitem(v, (slice(1, 3),))
        c = ops.concat([v, ops.transpose(ops.transpose(v))], axis=0)
        return ops.add(ops.add(ops.sum(ops.mul(g, w1)), ops.sum(ops.mul(s, w2))), ops.sum(ops.mul(c, w3)))
    return fn, x


# ---------------------------------------------------------------------------
# model objectives
# ---------------------------------------------------------------------------

def _mlp_regression(rng):
    act = "tanh" if rng.random() < 0.5 else "relu"
    model = BNN(Architecture((2, 6, 1), act), GaussianLikelihood(0.3), GaussianPrior(1.5))
    x, y = rng.normal((10, 2)), rng.normal((10, 1))
    return (lambda t: model.energy(t, (x, y), 40)), model.init_params(rng)


def _mlp_classification(rng):
    model = BNN(Architecture((2, 5, 3)), CategoricalLikelihood(3))
    x, y = rng.normal((8, 2)), rng.integers(0, 3, 8)
    return (lambda t: model.energy(t, (x, y), 8)), model.init_params(rng)


def _corr_target():
    return vi.gaussian_target(np.zeros(2), np.array([[2.0, 1.5], [1.5, 1.6]]))


def _random_q(rng, dim, lowrank: bool):
    mu = rng.normal(dim)
    if lowrank:
        return vi.LowRankGaussian.init(dim, 2, 1.0, mu, 0.5, rng)
    return vi.MeanFieldGaussian(mu, rng.normal(dim) * 0.3)


def _elbo(rng):
    model = BNN(Architecture((1, 4, 1)), GaussianLikelihood(0.5))
    q = _random_q(rng, model.dim, rng.random() < 0.5)
    x, y = rng.normal((6, 1)), rng.normal((6, 1))
    eps = rng.normal((3, q.noise_dim()))
    return (lambda p: vi.elbo_objective(q, p, model, eps, (x, y), 30)), q.params()


def _elbo_density(rng):
    q = _random_q(rng, 2, rng.random() < 0.5)
    eps = rng.normal((4, q.noise_dim()))
    return (lambda p: vi.elbo_objective(q, p, _corr_target(), eps)), q.params()


def _alpha_bound(rng):
    q = _random_q(rng, 2, rng.random() < 0.5)
    eps = rng.normal((8, q.noise_dim()))
    alpha = float(rng.choice(3, 1)[0]) * 0.45 + 0.01  # 0.01, 0.46, 0.91
    return (lambda p: vi.alpha_objective(q, p, _corr_target(), eps, alpha)), q.params()


def _dsm(rng):
    net = sd.ScoreNet.create(1, (6,), "tanh", rng)
    x = rng.normal((5, 1))
    eps = rng.normal((5, 1))
    sigma = 0.1 + rng.random()
    return (lambda t: sd.dsm_loss(net, x, sigma, eps=eps, theta=t)), net.params


def _ncsn(rng):
    net = sd.ScoreNet.create(1, (6,), "tanh", rng)
    ladder = sd.NoiseLadder.geometric(1.0, 0.1, 3)
    x = rng.normal((4, 1))
    eps = rng.normal((3, 4, 1))
    return (lambda t: sd.ncsn_loss(net, x, ladder, eps=eps, theta=t)), net.params


def _vp_dsm(rng):
    net = sd.ScoreNet.create(1, (6,), "tanh", rng)
    x = rng.normal((4, 1))
    t = rng.uniform(1e-3, 1.0, 4)
    eps = rng.normal((4, 1))
    return (lambda th: sd.vp_dsm_loss(net, x, sd.SDEConfig(), t=t, eps=eps, theta=th)), net.params


def _ebm_theta(rng):
    m = ebm.EnergyModel.mlp(Architecture((1, 6, 1)), rng)
    pos, neg = rng.normal((5, 1)), rng.normal((5, 1))
    return (lambda t: ops.sub(ops.mean(m.energy(pos, t)), ops.mean(m.energy(neg, t)))), m.params


def _ebm_weighted(rng):
    m = ebm.EnergyModel.mlp(Architecture((1, 6, 1)), rng)
    pos, neg = rng.normal((5, 1)), rng.normal((6, 1))
    w = rng.random(6)
    w /= w.sum()
    return (lambda t: ops.sub(ops.mean(m.energy(pos, t)), ops.sum(ops.mul(m.energy(neg, t), w)))), m.params


def _ebm_x(rng):
    m = ebm.EnergyModel.mlp(Architecture((2, 6, 1)), rng)
    return (lambda x: ops.sum(m.energy(x))), rng.normal((4, 2))


def _vae(iwae: bool):
    def make(rng):
        m = dlvm.VAEModel.create(3, 2, (4,), (4,), "tanh", 0.7, rng)
        x = rng.normal((3, 3))
        k = m.phi.size
        eps = rng.normal((4, 3, 2)) if iwae else rng.normal((3, 2))
        terms = dlvm.iwae_terms if iwae else dlvm.elbo_terms

        def fn(p):
            return ops.mean(terms(m, x, eps, ops.getitem(p, slice(0, k)), ops.getitem(p, slice(k, None))))
        return fn, m.params()
    return make


def _refine_drift(rng):
    m = dlvm.VAEModel.create(3, 2, (), (4,), "tanh", 0.7, rng)
    x = rng.normal((3, 3))
    return (lambda z: ops.sum(m.log_joint(x, z))), rng.normal((3, 2))


CASES: dict[str, Maker] = {
    "add": _binary(ops.add), "sub": _binary(ops.sub), "mul": _binary(ops.mul),
    "div": _binary(ops.div, safe_b=True), "neg": _unary(ops.neg), "power": _power,
    "square": _unary(ops.square), "sqrt": _unary(ops.sqrt, "positive"),
    "matmul": _matmul, "affine": _affine, "solve": _solve, "logdet": _logdet,
    "relu": _relu, "tanh": _unary(ops.tanh), "exp": _unary(ops.exp), "log": _unary(ops.log, "positive"),
    "softplus": _unary(ops.softplus), "sigmoid": _unary(ops.sigmoid), "clip": _clip,
    "sum": _reduction(lambda v: ops.sum(v, axis=1)), "mean": _reduction(lambda v: ops.mean(v, axis=1)),
    "log_sum_exp": _reduction(lambda v: ops.log_sum_exp(v, axis=1)),
    "softmax": _unary(ops.softmax), "log_softmax": _unary(ops.log_softmax),
    "indexing": _indexing,
    "mlp_regression_loss": _mlp_regression, "mlp_classification_loss": _mlp_classification,
    "elbo_bnn": _elbo, "elbo_density": _elbo_density, "alpha_bound": _alpha_bound,
    "dsm": _dsm, "ncsn": _ncsn, "vp_dsm": _vp_dsm,
    "ebm_energy_theta": _ebm_theta, "ebm_weighted_cd": _ebm_weighted, "ebm_energy_x": _ebm_x,
    "vae_elbo": _vae(False), "vae_iwae": _vae(True), "vae_log_joint_z": _refine_drift,
}


@dataclass
class GradcheckResult:
    name: str
    instances: int
    max_error: float

    def passed(self, tol: float) -> bool:
        return self.max_error < tol


def run_gradchecks(instances: int = 20, h: float = 1e-5, seed: int = 0,
                   names=None) -> list[GradcheckResult]:
    out = []
    for i, name in enumerate(sorted(CASES) if names is None else names):
        rng = RngStream(seed, 1000 + i)
        worst = 0.0
        for _ in range(instances):
            fn, x = CASES[name](rng)
            worst = max(worst, check_gradient(fn, x, h))
        out.append(GradcheckResult(name, instances, worst))
    return out
