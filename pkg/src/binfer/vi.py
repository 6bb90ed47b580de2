"""Variational inference: mean-field and low-rank Gaussian families, ELBO and alpha bounds."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .diffcore import RngStream, ops, value_and_grad
from .nets import BNN, MinibatchSampler
from .optim import SGD
from .sgmcmc import Schedule, check_state, schedule_from_dict

LOG_2PI = math.log(2.0 * math.pi)


def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(s):
    s = np.asarray(s, dtype=np.float64)
    return s + np.log(-np.expm1(-s))


# ---------------------------------------------------------------------------
# families
# ---------------------------------------------------------------------------

@dataclass
class MeanFieldGaussian:
    """q(theta) = N(mu, diag(softplus(rho)^2))."""

    mu: np.ndarray
    rho: np.ndarray
    family = "meanfield"

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        self.rho = np.asarray(self.rho, dtype=np.float64).reshape(-1)
        if self.mu.shape != self.rho.shape:
            raise ValueError("mu and rho must have the same length")

    @property
    def dim(self) -> int:
        return self.mu.size

    @property
    def sigma(self) -> np.ndarray:
        return softplus(self.rho)

    @property
    def variance(self) -> np.ndarray:
        return self.sigma ** 2

    @classmethod
    def init(cls, dim: int, tau: float = 1.0, mu=None, sigma_scale: float = 0.05):
        mu = np.zeros(dim) if mu is None else mu
        return cls(mu, np.full(dim, float(inv_softplus(sigma_scale * tau))))

    # flat parameter view used by the optimizer
    def params(self) -> np.ndarray:
        return np.concatenate([self.mu, self.rho])

    def with_params(self, p) -> "MeanFieldGaussian":
        d = self.dim
        return MeanFieldGaussian(p[:d].copy(), p[d:].copy())

    def noise_dim(self) -> int:
        return self.dim

    def log_prob(self, theta) -> np.ndarray:
        theta = np.atleast_2d(theta)
        s = self.sigma
        z = (theta - self.mu) / s
        return -0.5 * (z * z).sum(-1) - np.log(s).sum() - 0.5 * self.dim * LOG_2PI

    def t_log_density(self, theta):
        """log q(theta) row-wise, differentiable in theta only (params frozen)."""
        s = self.sigma
        z = ops.div(ops.sub(theta, self.mu), s)
        return ops.sub(ops.mul(ops.sum(ops.square(z), axis=-1), -0.5),
                       np.log(s).sum() + 0.5 * self.dim * LOG_2PI)

    def to_dict(self) -> dict:
        return {"family": "meanfield", "mu": self.mu.tolist(), "rho": self.rho.tolist()}

    # differentiable pieces, p = flat params (Tensor or array), eps = (M, d)
    def t_draw(self, p, eps):
        d = self.dim
        mu, rho = ops.getitem(p, slice(0, d)), ops.getitem(p, slice(d, 2 * d))
        return ops.add(mu, ops.mul(ops.softplus(rho), eps))

    def t_log_q(self, p, eps):
        d = self.dim
        log_sig = ops.sum(ops.log(ops.softplus(ops.getitem(p, slice(d, 2 * d)))))
        const = -0.5 * (eps * eps).sum(-1) - 0.5 * d * LOG_2PI
        return ops.sub(const, log_sig)

    def t_entropy(self, p):
        d = self.dim
        log_sig = ops.sum(ops.log(ops.softplus(ops.getitem(p, slice(d, 2 * d)))))
        return ops.add(log_sig, 0.5 * d * (1.0 + LOG_2PI))

    def t_kl(self, p, tau: float):
        d = self.dim
        mu, rho = ops.getitem(p, slice(0, d)), ops.getitem(p, slice(d, 2 * d))
        return mf_kl_terms(mu, ops.softplus(rho), tau)


def mf_kl_terms(mu, sigma, tau: float):
    """sum_i ln(tau/sigma_i) + (sigma_i^2 + mu_i^2) / (2 tau^2) - 1/2."""
    quad = ops.mul(ops.add(ops.square(sigma), ops.square(mu)), 0.5 / tau ** 2)
    terms = ops.add(ops.sub(quad, ops.log(sigma)), math.log(tau) - 0.5)
    return ops.sum(terms)


@dataclass
class LowRankGaussian:
    """q(theta) = N(mu, L L^T + D), D = diag(softplus(drho))."""

    mu: np.ndarray
    lfac: np.ndarray  # (d, r)
    drho: np.ndarray
    family = "lowrank"

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        self.lfac = np.asarray(self.lfac, dtype=np.float64)
        if self.lfac.ndim == 1:
            self.lfac = self.lfac.reshape(-1, 1)
        self.drho = np.asarray(self.drho, dtype=np.float64).reshape(-1)
        d = self.mu.size
        if self.lfac.shape[0] != d or self.drho.size != d:
            raise ValueError("mu, Lfac rows and diag must share the dimension")

    @classmethod
    def from_diag(cls, mu, lfac, diag):
        diag = np.asarray(diag, dtype=np.float64)
        if np.any(diag <= 0):
            raise ValueError("diagonal entries must be positive")
        return cls(mu, lfac, inv_softplus(diag))

    @classmethod
    def init(cls, dim: int, rank: int, tau: float = 1.0, mu=None, sigma_scale: float = 0.05,
             rng: RngStream | None = None):
        mu = np.zeros(dim) if mu is None else mu
        lfac = np.zeros((dim, rank)) if rng is None else 0.01 * sigma_scale * tau * rng.normal((dim, rank))
        return cls(mu, lfac, np.full(dim, float(inv_softplus((sigma_scale * tau) ** 2))))

    @property
    def dim(self) -> int:
        return self.mu.size

    @property
    def rank(self) -> int:
        return self.lfac.shape[1]

    @property
    def diag(self) -> np.ndarray:
        return softplus(self.drho)

    @property
    def variance(self) -> np.ndarray:
        return self.diag + (self.lfac ** 2).sum(1)

    def covariance(self) -> np.ndarray:
        return self.lfac @ self.lfac.T + np.diag(self.diag)

    def params(self) -> np.ndarray:
        return np.concatenate([self.mu, self.lfac.ravel(), self.drho])

    def with_params(self, p) -> "LowRankGaussian":
        d, r = self.dim, self.rank
        return LowRankGaussian(p[:d].copy(), p[d:d + d * r].reshape(d, r).copy(), p[d + d * r:].copy())

    def noise_dim(self) -> int:
        return self.rank + self.dim

    def log_prob(self, theta) -> np.ndarray:
        return np.asarray(lowrank_log_prob(self.mu, self.lfac, self.diag, np.atleast_2d(theta)))

    def t_log_density(self, theta):
        return lowrank_log_prob(self.mu, self.lfac, self.diag, theta)

    def to_dict(self) -> dict:
        return {"family": "lowrank", "mu": self.mu.tolist(), "Lfac": self.lfac.tolist(),
                "diag": self.diag.tolist()}

    def _split(self, p):
        d, r = self.dim, self.rank
        mu = ops.getitem(p, slice(0, d))
        lfac = ops.reshape(ops.getitem(p, slice(d, d + d * r)), (d, r))
        diag = ops.softplus(ops.getitem(p, slice(d + d * r, 2 * d + d * r)))
        return mu, lfac, diag

    def t_draw(self, p, eps):
        mu, lfac, diag = self._split(p)
        r = self.rank
        xi, e = eps[:, :r], eps[:, r:]
        return ops.add(ops.add(mu, ops.matmul(xi, ops.transpose(lfac))), ops.mul(ops.sqrt(diag), e))

    def t_log_q(self, p, eps):
        mu, lfac, diag = self._split(p)
        return lowrank_log_prob(mu, lfac, diag, self.t_draw(p, eps))

    def t_logdet(self, p):
        _, lfac, diag = self._split(p)
        return _lowrank_logdet(lfac, diag)

    def t_entropy(self, p):
        return ops.add(ops.mul(self.t_logdet(p), 0.5), 0.5 * self.dim * (1.0 + LOG_2PI))

    def t_kl(self, p, tau: float):
        """KL(q || N(0, tau^2 I)) in closed form."""
        mu, lfac, diag = self._split(p)
        d = self.dim
        tr = ops.add(ops.sum(diag), ops.sum(ops.square(lfac)))
        quad = ops.mul(ops.add(tr, ops.sum(ops.square(mu))), 1.0 / tau ** 2)
        inner = ops.sub(ops.add(quad, 2.0 * d * math.log(tau) - d), _lowrank_logdet(lfac, diag))
        return ops.mul(inner, 0.5)


def _lowrank_logdet(lfac, diag):
    # log det(L L^T + D) = log det(I + L^T D^-1 L) + sum log D
    r = ops.value_of(lfac).shape[1]
    lt_dinv = ops.div(ops.transpose(lfac), diag)
    cap = ops.add(np.eye(r), ops.matmul(lt_dinv, lfac))
    return ops.add(ops.logdet(cap), ops.sum(ops.log(diag)))


def lowrank_log_prob(mu, lfac, diag, theta):
    """Row-wise log N(theta; mu, L L^T + D) via the Woodbury identity; theta is (M, d)."""
    d = ops.value_of(mu).shape[0]
    r = ops.value_of(lfac).shape[1]
    diff = ops.sub(theta, mu)
    lt_dinv = ops.div(ops.transpose(lfac), diag)  # (r, d)
    cap = ops.add(np.eye(r), ops.matmul(lt_dinv, lfac))
    u = ops.matmul(lt_dinv, ops.transpose(diff))  # (r, M)
    quad = ops.sub(ops.sum(ops.div(ops.square(diff), diag), axis=-1),
                   ops.sum(ops.mul(u, ops.solve(cap, u)), axis=0))
    logdet = ops.add(ops.logdet(cap), ops.sum(ops.log(diag)))
    return ops.mul(ops.add(ops.add(quad, logdet), d * LOG_2PI), -0.5)


Family = MeanFieldGaussian | LowRankGaussian


def q_from_dict(d: dict) -> Family:
    if d["family"] == "meanfield":
        return MeanFieldGaussian(d["mu"], d["rho"])
    if d["family"] == "lowrank":
        return LowRankGaussian.from_diag(d["mu"], d["Lfac"], d["diag"])
    raise ValueError(f"unknown family {d['family']!r}")


def sample_q(q: Family, rng: RngStream, n: int | None = None):
    """Draws from q as plain arrays: (theta, eps); leading axis n if given."""
    m = 1 if n is None else n
    eps = rng.normal((m, q.noise_dim()))
    theta = np.asarray(q.t_draw(q.params(), eps))
    if n is None:
        return theta[0], eps[0]
    return theta, eps


def mf_sample(q: MeanFieldGaussian, rng: RngStream, n: int | None = None):
    """theta = mu + sigma * eps; eps is returned so callers can differentiate through it."""
    return sample_q(q, rng, n)


def lowrank_sample(q: LowRankGaussian, rng: RngStream, n: int | None = None) -> np.ndarray:
    """theta = mu + L xi + sqrt(D) eps."""
    return sample_q(q, rng, n)[0]


def gaussian_kl(q: Family, tau: float) -> float:
    """KL(q || N(0, tau^2 I))."""
    if not tau > 0:
        raise ValueError("prior scale must be positive")
    return float(q.t_kl(q.params(), tau))


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------

@dataclass
class DensityTarget:
    """Unnormalized log density over R^dim, evaluated row-wise on (M, dim) inputs."""

    log_density: Callable
    dim: int


def gaussian_target(mean, cov) -> DensityTarget:
    mean = np.asarray(mean, dtype=np.float64)
    prec = np.linalg.inv(np.asarray(cov, dtype=np.float64))

    def log_density(theta):
        diff = ops.sub(theta, mean)
        return ops.mul(ops.sum(ops.mul(ops.matmul(diff, prec), diff), axis=-1), -0.5)

    return DensityTarget(log_density, mean.size)


def _scaled_loglik(model: BNN, theta_row, batch, n_total):
    x, y = batch
    return ops.mul(model.log_likelihood(theta_row, x, y), n_total / len(x))


def _log_joint_rows(target, thetas, batch, n_total):
    """(M,) log p~ for each row of thetas."""
    if isinstance(target, DensityTarget):
        return target.log_density(thetas)
    rows = []
    m = ops.value_of(thetas).shape[0]
    for i in range(m):
        th = ops.getitem(thetas, i)
        lj = target.log_prior(th) if n_total == 0 else ops.add(
            _scaled_loglik(target, th, batch, n_total), target.log_prior(th))
        rows.append(ops.reshape(lj, (1,)))
    return rows[0] if m == 1 else ops.concat(rows)


def alpha_bound_from_logweights(w, alpha: float):
    """(1/(1-alpha)) [lse((1-alpha) w) - log M]; alpha == 1 gives mean(w)."""
    m = ops.value_of(w).shape[0]
    if alpha == 1.0:
        return ops.mean(w)
    a = 1.0 - alpha
    return ops.mul(ops.sub(ops.log_sum_exp(ops.mul(w, a)), math.log(m)), 1.0 / a)


def elbo_objective(q: Family, p, target, eps, batch=None, n_total: int = 0):
    """Same-eps ELBO estimate as a differentiable function of flat params ``p``.

    BNN targets use the analytic KL to the prior; density targets use the
    analytic entropy of q.
    """
    thetas = q.t_draw(p, eps)
    if isinstance(target, DensityTarget):
        return ops.add(ops.mean(target.log_density(thetas)), q.t_entropy(p))
    kl = q.t_kl(p, target.prior.scale)
    if n_total == 0:
        return ops.neg(kl)
    m = eps.shape[0]
    lls = [_scaled_loglik(target, ops.getitem(thetas, i), batch, n_total) for i in range(m)]
    total = lls[0]
    for ll in lls[1:]:
        total = ops.add(total, ll)
    return ops.sub(ops.mul(total, 1.0 / m), kl)


def alpha_objective(q: Family, p, target, eps, alpha: float, batch=None, n_total: int = 0):
    """Same-eps alpha bound with log-weights w_m = log p~(theta_m) - log q(theta_m)."""
    thetas = q.t_draw(p, eps)
    w = ops.sub(_log_joint_rows(target, thetas, batch, n_total), q.t_log_q(p, eps))
    return alpha_bound_from_logweights(w, alpha)


def alpha_dreg_surrogate(q: Family, p, target, eps, alpha: float, batch=None, n_total: int = 0):
    """Doubly reparameterized gradient surrogate for the alpha bound.

    Returns (bound value, surrogate). The surrogate's gradient in ``p`` is
    sum_m [alpha w^_m + (1 - alpha) w^_m^2] d log w_m / d theta_m * d theta_m / dp
    with w^ = softmax((1 - alpha) log w): the reparameterized gradient with the
    zero-mean score term of log q integrated out, which keeps heavy-tailed
    weights at small alpha from swamping the signal.
    """
    frozen = q.with_params(np.asarray(ops.value_of(p)))
    thetas = q.t_draw(p, eps)
    w = ops.sub(_log_joint_rows(target, thetas, batch, n_total), frozen.t_log_density(thetas))
    wv = np.asarray(ops.value_of(w))
    a = 1.0 - alpha
    z = a * wv
    what = np.exp(z - z.max())
    what /= what.sum()
    coef = alpha * what + a * what * what
    return float(alpha_bound_from_logweights(wv, alpha)), ops.sum(ops.mul(w, coef))


@dataclass(frozen=True)
class AlphaConfig:
    alpha: float
    mc_samples: int = 1

    def __post_init__(self):
        if self.alpha == 1.0:
            raise ValueError("alpha = 1 is the ELBO; use the elbo objective")
        if self.mc_samples < 1:
            raise ValueError("need at least one Monte Carlo sample")


def _full_batch(data):
    if data is None:
        return None, 0
    x, y = data
    return (x, y), len(x)


def elbo_minibatch_estimate(q: Family, target, batch, n_total: int, rng: RngStream,
                            mc_samples: int = 1, eps=None) -> float:
    """(N/|batch|) sum log p(y|f_theta(x)) - KL[q||p] with theta = mu + sigma eps."""
    if not isinstance(target, DensityTarget) and n_total and (batch is None or len(batch[0]) == 0):
        raise ValueError("empty minibatch")
    if eps is None:
        eps = rng.normal((mc_samples, q.noise_dim()))
    return float(elbo_objective(q, q.params(), target, np.atleast_2d(eps), batch, n_total))


def alpha_bound_estimate(q: Family, target, data, cfg: AlphaConfig | float, rng: RngStream,
                         eps=None) -> float:
    """Monte Carlo alpha bound on log p(D); pass ``eps`` to reuse draws across alphas."""
    if not isinstance(cfg, AlphaConfig):
        alpha, m = float(cfg), 1
    else:
        alpha, m = cfg.alpha, cfg.mc_samples
    if eps is None:
        eps = rng.normal((m, q.noise_dim()))
    batch, n = _full_batch(data)
    return float(alpha_objective(q, q.params(), target, np.atleast_2d(eps), alpha, batch, n))


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VIConfig:
    """Settings for :func:`fit_vi`. ``schedule`` overrides the constant ``lr``."""

    family: str = "meanfield"
    rank: int = 1
    objective: str = "elbo"
    alpha: float = 1.0
    mc_samples: int = 1
    steps: int = 1000
    lr: float = 1e-3
    schedule: dict | None = None
    batch_size: int | None = None
    sigma_scale: float = 0.05
    tau: float = 1.0  # init scale for density targets; BNNs use the prior scale
    init_mu_scale: float = 1.0
    average_tail: float = 0.0  # fraction of final iterates averaged into the returned q
    gradient: str = "reparam"  # or "dreg": doubly reparameterized; for the ELBO this is sticking-the-landing

    def __post_init__(self):
        if self.family not in ("meanfield", "lowrank"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.objective not in ("elbo", "alpha"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.objective == "alpha" and self.alpha == 1.0:
            raise ValueError("alpha = 1 is the ELBO; use the elbo objective")
        if self.steps < 1 or self.mc_samples < 1 or self.rank < 1:
            raise ValueError("steps, mc_samples and rank must be >= 1")
        if not 0.0 <= self.average_tail < 1.0:
            raise ValueError("average_tail must lie in [0, 1)")
        if self.gradient not in ("reparam", "dreg"):
            raise ValueError(f"unknown gradient estimator {self.gradient!r}")

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class VIResult:
    q: Family
    trace: np.ndarray  # per-step bound estimate
    meta: dict = field(default_factory=dict)


def init_q(config: VIConfig, target, rng: RngStream) -> Family:
    if isinstance(target, DensityTarget):
        tau = config.tau
        mu = config.init_mu_scale * rng.normal(target.dim)
    else:
        tau = target.prior.scale
        mu = target.init_params(rng)
    dim = mu.size
    if config.family == "meanfield":
        return MeanFieldGaussian.init(dim, tau, mu, config.sigma_scale)
    return LowRankGaussian.init(dim, config.rank, tau, mu, config.sigma_scale, rng)


def fit_vi(config: VIConfig, target, data, rng: RngStream, q0: Family | None = None) -> VIResult:
    """Stochastic gradient ascent on the chosen bound with reparameterized gradients.

    ``target`` is a BNN (with ``data`` an (x, y) pair, or None for prior-only)
    or a DensityTarget (``data`` ignored).
    """
    q = init_q(config, target, rng) if q0 is None else q0
    lr: float | Callable = config.lr
    if config.schedule is not None:
        sched: Schedule = schedule_from_dict(config.schedule)
        lr = sched
    opt = SGD(lr)
    if isinstance(target, DensityTarget) or data is None:
        n, batcher = 0, None
    else:
        x, y = data
        n = len(x)
        batcher = MinibatchSampler(n, config.batch_size, rng)

    p = q.params()
    trace = np.empty(config.steps)
    avg_from = config.steps - int(config.average_tail * config.steps) + 1
    p_sum, n_avg = np.zeros_like(p), 0
    for t in range(1, config.steps + 1):
        batch = None
        if batcher is not None:
            idx = batcher.next()
            batch = (x[idx], y[idx])
        eps = rng.normal((config.mc_samples, q.noise_dim()))
        if config.gradient == "dreg":
            out = {}
            alpha = 1.0 if config.objective == "elbo" else config.alpha

            def surrogate(pp):
                out["val"], sur = alpha_dreg_surrogate(q, pp, target, eps, alpha, batch, n)
                return sur
            g = value_and_grad(surrogate, p)[1]
            val = out["val"]
        elif config.objective == "elbo":
            val, g = value_and_grad(lambda pp: elbo_objective(q, pp, target, eps, batch, n), p)
        else:
            val, g = value_and_grad(
                lambda pp: alpha_objective(q, pp, target, eps, config.alpha, batch, n), p)
        trace[t - 1] = val
        p = opt.step(p, -g)  # ascent on the bound
        check_state(p, t)
        if t >= avg_from:
            p_sum += p
            n_avg += 1
    q = q.with_params(p_sum / n_avg if n_avg > 1 else p)
    meta = {"vi": config.to_dict(), "seed": rng.seed, "stream_id": rng.stream_id}
    return VIResult(q, trace, meta)
