"""Latent variable models: probabilistic PCA, VAE bounds, Langevin-refined posteriors."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .diffcore import RngStream, ops, value_and_grad
from .nets import Architecture, ParamVector, init_params, mlp_forward
from .optim import make_optimizer
from .sgmcmc import DivergenceError, check_state

LOG_2PI = math.log(2.0 * math.pi)
LOG_SIGMA_RANGE = (-7.0, 2.0)


# ---------------------------------------------------------------------------
# probabilistic PCA
# ---------------------------------------------------------------------------

@dataclass
class PPCAModel:
    """x = W z + b + sigma eps with z ~ N(0, I)."""

    W: np.ndarray
    b: np.ndarray
    sigma: float

    def __post_init__(self):
        self.W = np.atleast_2d(np.asarray(self.W, dtype=np.float64))
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if self.W.shape[0] != self.b.size:
            raise ValueError("W rows must match the length of b")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @property
    def d_x(self) -> int:
        return self.W.shape[0]

    @property
    def d_z(self) -> int:
        return self.W.shape[1]

    def covariance(self) -> np.ndarray:
        return self.W @ self.W.T + self.sigma ** 2 * np.eye(self.d_x)

    def posterior(self, x):
        """Exact p(z | x): mean rows and the shared covariance."""
        prec = np.eye(self.d_z) + self.W.T @ self.W / self.sigma ** 2
        cov = np.linalg.inv(prec)
        mean = (np.atleast_2d(x) - self.b) @ self.W @ cov / self.sigma ** 2
        return mean, cov

    def sample(self, n: int, rng: RngStream) -> np.ndarray:
        z = rng.normal((n, self.d_z))
        return z @ self.W.T + self.b + self.sigma * rng.normal((n, self.d_x))


def ppca_exact_loglik(m: PPCAModel, x):
    """log N(x; b, W W^T + sigma^2 I) by Cholesky; one value per row of x."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x) - m.b
    try:
        chol = np.linalg.cholesky(m.covariance())
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("PPCA covariance is singular") from None
    z = np.linalg.solve(chol, X.T)
    out = -0.5 * (z * z).sum(0) - np.log(np.diag(chol)).sum() - 0.5 * m.d_x * LOG_2PI
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# VAE
# ---------------------------------------------------------------------------

@dataclass
class VAEModel:
    """Gaussian encoder q(z|x) = N(mu(x), sigma(x)^2) and Gaussian decoder N(f(z), s^2 I)."""

    encoder: Architecture  # d_x -> 2 d_z
    decoder: Architecture  # d_z -> d_x
    phi: np.ndarray
    theta: np.ndarray
    lik_sigma: float

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.float64)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.encoder.d_out != 2 * self.decoder.d_in:
            raise ValueError("encoder output must be 2 * d_z")
        if self.encoder.d_in != self.decoder.d_out:
            raise ValueError("encoder input and decoder output must share d_x")
        if self.phi.shape != (self.encoder.n_params,) or self.theta.shape != (self.decoder.n_params,):
            raise ValueError("parameter vectors do not match the architectures")
        if not self.lik_sigma > 0:
            raise ValueError("decoder sigma must be positive")

    @property
    def d_z(self) -> int:
        return self.decoder.d_in

    @property
    def d_x(self) -> int:
        return self.decoder.d_out

    @classmethod
    def create(cls, d_x: int, d_z: int, enc_hidden=(), dec_hidden=(), activation="tanh",
               lik_sigma: float = 1.0, rng: RngStream | None = None) -> "VAEModel":
        enc = Architecture((d_x, *enc_hidden, 2 * d_z), activation)
        dec = Architecture((d_z, *dec_hidden, d_x), activation)
        return cls(enc, dec, init_params(enc, rng), init_params(dec, rng), lik_sigma)

    @classmethod
    def from_ppca(cls, ppca: PPCAModel, encoder: str = "exact") -> "VAEModel":
        """Linear decoder equal to ``ppca``; linear encoder at the best mean-field posterior.

        ``encoder="exact"`` gives mu(x) = exact posterior mean and log sigma from
        the diagonal of the posterior precision (the exact posterior when d_z = 1).
        """
        d_x, d_z = ppca.d_x, ppca.d_z
        enc = Architecture((d_x, 2 * d_z))
        dec = Architecture((d_z, d_x))
        theta = ParamVector.from_layers(dec, [(ppca.W, ppca.b)]).values
        prec = np.eye(d_z) + ppca.W.T @ ppca.W / ppca.sigma ** 2
        A = np.linalg.solve(prec, ppca.W.T) / ppca.sigma ** 2  # (d_z, d_x)
        w_enc = np.vstack([A, np.zeros((d_z, d_x))])
        b_enc = np.concatenate([-A @ ppca.b, -0.5 * np.log(np.diag(prec))])
        if encoder != "exact":
            raise ValueError(f"unknown encoder init {encoder!r}")
        phi = ParamVector.from_layers(enc, [(w_enc, b_enc)]).values
        return cls(enc, dec, phi, theta, ppca.sigma)

    def encode(self, x, phi=None):
        """(mu, log sigma) with log sigma clamped to a safe range."""
        phi = self.phi if phi is None else phi
        h = mlp_forward(phi, self.encoder, np.atleast_2d(x))
        dz = self.d_z
        mu = ops.getitem(h, (slice(None), slice(0, dz)))
        log_sig = ops.clip(ops.getitem(h, (slice(None), slice(dz, 2 * dz))), *LOG_SIGMA_RANGE)
        return mu, log_sig

    def decode(self, z, theta=None):
        theta = self.theta if theta is None else theta
        return mlp_forward(theta, self.decoder, z)

    def log_lik(self, x, z, theta=None):
        """log N(x; f(z), s^2 I) per row; x broadcasts against z rows."""
        f = self.decode(z, theta)
        s = self.lik_sigma
        sq = ops.sum(ops.square(ops.sub(x, f)), axis=-1)
        return ops.sub(-0.5 * self.d_x * (LOG_2PI + 2.0 * math.log(s)), ops.mul(sq, 0.5 / s ** 2))

    def log_joint(self, x, z, theta=None):
        """log p(x | z) + log p(z) per row."""
        prior = ops.sub(-0.5 * self.d_z * LOG_2PI, ops.mul(ops.sum(ops.square(z), axis=-1), 0.5))
        return ops.add(self.log_lik(x, z, theta), prior)

    def params(self) -> np.ndarray:
        return np.concatenate([self.phi, self.theta])

    def with_params(self, p) -> "VAEModel":
        k = self.phi.size
        return VAEModel(self.encoder, self.decoder, p[:k].copy(), p[k:].copy(), self.lik_sigma)

    def to_dict(self) -> dict:
        return {"kind": "vae", "encoder": self.encoder.to_dict(), "decoder": self.decoder.to_dict(),
                "lik_sigma": self.lik_sigma}


def _log_q(eps, log_sig):
    """log N(z; mu, sigma^2) at z = mu + sigma eps, per row."""
    const = -0.5 * (eps * eps).sum(-1) - 0.5 * eps.shape[-1] * LOG_2PI
    return ops.sub(const, ops.sum(log_sig, axis=-1))


def elbo_terms(m: VAEModel, x, eps, phi=None, theta=None, kl: str = "analytic"):
    """Per-row single-sample ELBO with z = mu + sigma eps; eps is (n, d_z).

    ``kl="analytic"`` uses the closed-form Gaussian KL; ``kl="mc"`` uses
    log p(z) - log q(z|x) at the same draw.
    """
    x = np.atleast_2d(x)
    mu, log_sig = m.encode(x, phi)
    z = ops.add(mu, ops.mul(ops.exp(log_sig), eps))
    if kl == "mc":
        return ops.sub(m.log_joint(x, z, theta), _log_q(eps, log_sig))
    if kl != "analytic":
        raise ValueError(f"unknown kl mode {kl!r}")
    # KL(N(mu, s^2) || N(0, 1)) = 1/2 sum (mu^2 + s^2 - 1) - sum log s
    kl_val = ops.sub(ops.mul(ops.sum(ops.add(ops.square(mu), ops.exp(ops.mul(log_sig, 2.0))), axis=-1), 0.5),
                     ops.add(ops.sum(log_sig, axis=-1), 0.5 * m.d_z))
    return ops.sub(m.log_lik(x, z, theta), kl_val)


def iwae_terms(m: VAEModel, x, eps, phi=None, theta=None):
    """Per-row log (1/M) sum_m w_m with eps of shape (M, n, d_z)."""
    x = np.atleast_2d(x)
    M, n, dz = eps.shape
    mu, log_sig = m.encode(x, phi)
    sig = ops.exp(log_sig)
    # stack the M draws row-wise: block k holds draw k for every x
    z = ops.add(ops.concat([mu] * M), ops.mul(ops.concat([sig] * M), eps.reshape(M * n, dz)))
    log_q = _log_q(eps.reshape(M * n, dz), ops.concat([log_sig] * M))
    log_w = ops.sub(m.log_joint(np.tile(x, (M, 1)), z, theta), log_q)
    log_w = ops.reshape(log_w, (M, n))
    return ops.sub(ops.log_sum_exp(log_w, axis=0), math.log(M))


def vae_elbo_estimate(m: VAEModel, x, rng: RngStream | None = None, eps=None, kl: str = "analytic"):
    """Single-draw reparameterized ELBO: a float for one x, an array for rows of x."""
    x = np.asarray(x, dtype=np.float64)
    X = np.atleast_2d(x)
    if eps is None:
        eps = rng.normal((X.shape[0], m.d_z))
    out = np.asarray(elbo_terms(m, X, np.atleast_2d(eps), kl=kl))
    return float(out[0]) if x.ndim == 1 else out


def iwae_bound_estimate(m: VAEModel, x, M: int, rng: RngStream | None = None, eps=None):
    """IWAE_M estimate computed from log-weights with a shifted log-sum-exp."""
    if M < 1:
        raise ValueError("need M >= 1")
    x = np.asarray(x, dtype=np.float64)
    X = np.atleast_2d(x)
    if eps is None:
        eps = rng.normal((M, X.shape[0], m.d_z))
    eps = np.asarray(eps, dtype=np.float64).reshape(M, X.shape[0], m.d_z)
    out = np.asarray(iwae_terms(m, X, eps))
    return float(out[0]) if x.ndim == 1 else out


# ---------------------------------------------------------------------------
# refinement and distillation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RefineConfig:
    steps: int = 0
    step_size: float = 1e-3

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("refinement steps must be >= 0")
        if not self.step_size > 0:
            raise ValueError("step size must be positive")


def grad_z_log_joint(m: VAEModel, x, z) -> np.ndarray:
    """nabla_z log p(x, z) with decoder parameters held as constants."""
    return value_and_grad(lambda zz: ops.sum(m.log_joint(x, zz)), z)[1]


def langevin_refine(m: VAEModel, x, z0, cfg: RefineConfig, rng: RngStream) -> np.ndarray:
    """K Langevin steps on log p(x, z) in z; x rows pair with z rows."""
    z = np.array(np.atleast_2d(z0), dtype=np.float64)
    x = np.atleast_2d(x)
    for k in range(cfg.steps):
        z = _kernels.langevin_update(z, grad_z_log_joint(m, x, z), cfg.step_size, rng.normal(z.shape))
        if not np.isfinite(z).all():
            raise DivergenceError(k + 1, "non-finite latent state")
    return z


def distill_loss(m: VAEModel, x, z_refined, phi=None):
    """mean over rows of -log q_phi(z_K | x); z_K enters as a constant."""
    mu, log_sig = m.encode(np.atleast_2d(x), phi)
    z = np.atleast_2d(np.asarray(z_refined, dtype=np.float64))
    u = ops.div(ops.sub(z, mu), ops.exp(log_sig))
    nll = ops.add(ops.sum(ops.add(ops.mul(ops.square(u), 0.5), log_sig), axis=-1), 0.5 * m.d_z * LOG_2PI)
    return ops.mean(nll)


def distill_init(m: VAEModel, x, z_refined) -> np.ndarray:
    """Gradient in phi of the mean negative log density of q_phi at refined samples."""
    return value_and_grad(lambda ph: distill_loss(m, x, z_refined, ph), m.phi)[1]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VAEConfig:
    d_z: int = 1
    enc_hidden: tuple = ()
    dec_hidden: tuple = ()
    activation: str = "tanh"
    lik_sigma: float = 1.0
    objective: str = "elbo"
    iwae_samples: int = 16
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-2
    optimizer: str = "adam"
    refine: RefineConfig = field(default_factory=RefineConfig)

    def __post_init__(self):
        if self.objective not in ("elbo", "iwae"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.iwae_samples < 1 or self.steps < 1 or self.batch_size < 1:
            raise ValueError("iwae_samples, steps and batch_size must be >= 1")

    def to_dict(self):
        d = dict(self.__dict__)
        d["refine"] = dict(self.refine.__dict__)
        d["enc_hidden"], d["dec_hidden"] = list(self.enc_hidden), list(self.dec_hidden)
        return d


@dataclass
class VAEResult:
    model: VAEModel
    bounds: np.ndarray  # per-step minibatch bound


def train_vae(config: VAEConfig, data, rng: RngStream, model: VAEModel | None = None) -> VAEResult:
    """Joint minibatch ascent on (theta, phi).

    With refinement enabled, phi follows the distillation gradient and theta
    the gradient of log p(x, z_K) at the refined latents.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    n, d_x = data.shape
    if model is None:
        model = VAEModel.create(d_x, config.d_z, config.enc_hidden, config.dec_hidden,
                                config.activation, config.lik_sigma, rng)
    opt = make_optimizer(config.optimizer, config.lr)
    p = model.params()
    k = model.phi.size
    bounds = np.empty(config.steps)
    for t in range(1, config.steps + 1):
        x = data[rng.integers(0, n, min(config.batch_size, n))]
        if config.objective == "elbo":
            eps = rng.normal((len(x), model.d_z))

            def neg_bound(pp):
                return ops.neg(ops.mean(elbo_terms(model, x, eps, ops.getitem(pp, slice(0, k)),
                                                   ops.getitem(pp, slice(k, None)))))
        else:
            eps = rng.normal((config.iwae_samples, len(x), model.d_z))

            def neg_bound(pp):
                return ops.neg(ops.mean(iwae_terms(model, x, eps, ops.getitem(pp, slice(0, k)),
                                                   ops.getitem(pp, slice(k, None)))))

        val, g = value_and_grad(neg_bound, p)
        bounds[t - 1] = -val
        if config.refine.steps > 0:
            cur = model.with_params(p)
            mu, log_sig = (np.asarray(a) for a in cur.encode(x))
            z0 = mu + np.exp(log_sig) * rng.normal(mu.shape)
            zk = langevin_refine(cur, x, z0, config.refine, rng)
            g_phi = distill_init(cur, x, zk)
            g_theta = value_and_grad(lambda th: ops.neg(ops.mean(cur.log_joint(x, zk, th))), cur.theta)[1]
            g = np.concatenate([g_phi, g_theta])
        p = opt.step(p, g)
        check_state(p, t)
    return VAEResult(model.with_params(p), bounds)
