"""Score networks, denoising score matching, annealed Langevin and VP-SDE sampling."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _kernels
from .diffcore import RngStream, ops, value_and_grad
from .nets import Architecture, init_params, mlp_forward
from .optim import Adam, cosine_decay
from .sgmcmc import DivergenceError, check_state


# ---------------------------------------------------------------------------
# score network and noise ladder
# ---------------------------------------------------------------------------

@dataclass
class ScoreNet:
    """s_theta(x, sigma): an MLP on [x, sigma] with output in data space."""

    arch: Architecture
    params: np.ndarray

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.arch.d_in != self.arch.d_out + 1:
            raise ValueError("score net needs d_in = d + 1 (noise channel) and d_out = d")
        if self.params.shape != (self.arch.n_params,):
            raise ValueError("parameter vector does not match the architecture")

    @classmethod
    def create(cls, d: int, hidden=(64, 64), activation: str = "tanh", rng: RngStream | None = None):
        arch = Architecture((d + 1, *hidden, d), activation)
        return cls(arch, init_params(arch, rng))

    @property
    def d(self) -> int:
        return self.arch.d_out

    def forward(self, x, sigma, theta=None):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        col = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (x.shape[0],)).reshape(-1, 1)
        theta = self.params if theta is None else theta
        return mlp_forward(theta, self.arch, np.concatenate([x, col], axis=1))

    def __call__(self, x, sigma) -> np.ndarray:
        return np.asarray(self.forward(x, sigma))

    def to_dict(self) -> dict:
        return {"kind": "score_net", "arch": self.arch.to_dict()}


@dataclass(frozen=True)
class NoiseLadder:
    sigmas: tuple

    def __post_init__(self):
        s = tuple(float(v) for v in self.sigmas)
        object.__setattr__(self, "sigmas", s)
        if not s:
            raise ValueError("ladder needs at least one noise scale")
        if min(s) <= 0:
            raise ValueError("noise scales must be positive")
        if any(a <= b for a, b in zip(s[:-1], s[1:])):
            raise ValueError("noise scales must be strictly decreasing")

    @classmethod
    def geometric(cls, sigma_max: float, sigma_min: float, n: int) -> "NoiseLadder":
        if n == 1:
            return cls((sigma_max,))
        return cls(tuple(np.geomspace(sigma_max, sigma_min, n)))

    def __len__(self):
        return len(self.sigmas)


def gaussian_score(data_var: float = 1.0) -> Callable:
    """Score of N(0, data_var) convolved with N(0, sigma^2): -x / (data_var + sigma^2)."""
    def score(x, sigma):
        return -np.asarray(x) / (data_var + np.asarray(sigma) ** 2)
    return score


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def dsm_loss(net: ScoreNet, batch, sigma: float, rng: RngStream | None = None, eps=None,
             theta=None):
    """1/2 E || s(x + sigma eps, sigma) + eps / sigma ||^2, one eps per point."""
    if not sigma > 0:
        raise ValueError("noise scale must be positive")
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if eps is None:
        eps = rng.normal(x.shape)
    s = net.forward(x + sigma * eps, sigma, theta)
    resid = ops.add(s, eps / sigma)
    return ops.mul(ops.mean(ops.sum(ops.square(resid), axis=-1)), 0.5)


def ncsn_loss(net: ScoreNet, batch, ladder: NoiseLadder, rng: RngStream | None = None, eps=None,
              theta=None):
    """sum_i sigma_i^2 * dsm_loss(sigma_i), all scales in one stacked forward pass.

    ``eps`` if given has shape (L, n, d).
    """
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    n, d = x.shape
    sig = np.asarray(ladder.sigmas)
    L = sig.size
    if eps is None:
        eps = rng.normal((L, n, d))
    noisy = (x[None] + sig[:, None, None] * eps).reshape(L * n, d)
    s = net.forward(noisy, np.repeat(sig, n), theta)
    # sigma * s + eps is the weighted residual: sigma^2 || s + eps/sigma ||^2
    resid = ops.add(ops.mul(s, np.repeat(sig, n)[:, None]), eps.reshape(L * n, d))
    return ops.mul(ops.sum(ops.square(resid)), 0.5 / n)


# ---------------------------------------------------------------------------
# VP SDE
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SDEConfig:
    """Variance-preserving SDE with beta(t) = beta_min + t (beta_max - beta_min) on [0, 1]."""

    beta_min: float = 0.1
    beta_max: float = 20.0
    n_steps: int = 1000
    t_eps: float = 1e-3  # smallest training time for learned scores

    def __post_init__(self):
        if not 0 < self.beta_min < self.beta_max:
            raise ValueError("need 0 < beta_min < beta_max")
        if self.n_steps < 1:
            raise ValueError("need at least one step")

    def beta(self, t):
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def int_beta(self, t):
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t


def vp_forward_marginal(x0, t: float, sde: SDEConfig):
    """(m(t), v(t)) with x_t | x0 ~ N(m x0, v I); returned as scalars (x0 unused)."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    ib = sde.int_beta(t)
    return math.exp(-0.5 * ib), -math.expm1(-ib)


def vp_analytic_score(sde: SDEConfig, data_var: float = 1.0) -> Callable:
    """Exact score of p_t for N(0, data_var) data: -x / (m(t)^2 data_var + v(t))."""
    def score(x, t):
        m, v = vp_forward_marginal(None, t, sde)
        return -np.asarray(x) / (m * m * data_var + v)
    return score


def net_time_score(net: ScoreNet, sde: SDEConfig) -> Callable:
    """Wrap a VP-trained net as s(x, t) with the noise channel set to sqrt(v(t))."""
    def score(x, t):
        return net(x, math.sqrt(vp_forward_marginal(None, t, sde)[1]))
    return score


def simulate_forward(x0, sde: SDEConfig, t_end: float, rng: RngStream, n_steps: int | None = None):
    """Euler-Maruyama on dx = -1/2 beta x dt + sqrt(beta) dw from 0 to ``t_end``."""
    n = sde.n_steps if n_steps is None else n_steps
    x = np.array(x0, dtype=np.float64)
    dt = t_end / n
    for i in range(n):
        x = _kernels.vp_forward_step(x, sde.beta(i * dt), dt, rng.normal(x.shape))
    return x


def vp_dsm_loss(net: ScoreNet, batch, sde: SDEConfig, rng: RngStream | None = None,
                t=None, eps=None, theta=None):
    """E_t v(t) * 1/2 || s(x_t, sqrt v) + eps / sqrt v ||^2 with t ~ U(t_eps, 1)."""
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    n = x.shape[0]
    if t is None:
        t = rng.uniform(sde.t_eps, 1.0, n)
    if eps is None:
        eps = rng.normal(x.shape)
    ib = sde.int_beta(np.asarray(t))
    m, v = np.exp(-0.5 * ib), -np.expm1(-ib)
    sd = np.sqrt(v)
    s = net.forward(m[:, None] * x + sd[:, None] * eps, sd, theta)
    resid = ops.add(ops.mul(s, sd[:, None]), eps)
    return ops.mul(ops.sum(ops.square(resid)), 0.5 / n)


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------

def annealed_langevin_sample(score: Callable, ladder: NoiseLadder, steps_per_scale: int,
                             eps0: float, rng: RngStream, x0=None, n: int | None = None,
                             d: int = 1):
    """Langevin at each sigma_i (largest first) with a_i = eps0 sigma_i^2 / sigma_L^2.

    ``score(x, sigma)`` may be a ScoreNet or any callable. Starts from ``x0``
    or N(0, sigma_1^2) noise of shape (n, d).
    """
    if x0 is None:
        x = ladder.sigmas[0] * rng.normal((n, d))
    else:
        x = np.array(x0, dtype=np.float64)
    s_last = ladder.sigmas[-1]
    for i, sigma in enumerate(ladder.sigmas):
        a = eps0 * sigma ** 2 / s_last ** 2
        for k in range(steps_per_scale):
            x = _kernels.langevin_update(x, np.asarray(score(x, sigma)), a, rng.normal(x.shape))
            if not np.isfinite(x).all():
                raise DivergenceError(i * steps_per_scale + k + 1, "non-finite Langevin state")
    return x


def pc_sample(score: Callable, sde: SDEConfig, rng: RngStream, n: int, d: int = 1,
              corrector_steps: int = 0, snr: float = 0.16, n_steps: int | None = None,
              x1=None):
    """Reverse-time VP sampler: Euler-Maruyama predictor plus optional Langevin corrector.

    ``score(x, t)`` is the time-dependent score. Corrector step sizes follow
    a = 2 (snr ||z|| / ||s||)^2 with norms averaged over the batch.
    """
    N = sde.n_steps if n_steps is None else n_steps
    x = rng.normal((n, d)) if x1 is None else np.array(x1, dtype=np.float64)
    dt = 1.0 / N
    for i in range(N):
        t = 1.0 - i * dt
        for _ in range(corrector_steps):
            s = np.asarray(score(x, t))
            z = rng.normal(x.shape)
            s_norm = np.linalg.norm(s.reshape(n, -1), axis=1).mean()
            z_norm = np.linalg.norm(z.reshape(n, -1), axis=1).mean()
            if s_norm > 0:
                a = 2.0 * (snr * z_norm / s_norm) ** 2
                x = _kernels.langevin_update(x, s, a, z)
        x = _kernels.vp_reverse_step(x, np.asarray(score(x, t)), sde.beta(t), dt, rng.normal(x.shape))
        if not np.isfinite(x).all():
            raise DivergenceError(i + 1, "non-finite reverse-SDE state")
    return x


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScoreConfig:
    mode: str = "ncsn"  # or "vp"
    hidden: tuple = (64, 64)
    activation: str = "relu"
    steps: int = 3000
    batch_size: int = 128
    lr: float = 3e-3
    lr_floor: float = 0.02
    sigma_max: float = 1.0
    sigma_min: float = 0.1
    n_scales: int = 11
    beta_min: float = 0.1
    beta_max: float = 20.0
    ema: float = 0.999  # decay of the parameter moving average returned as the model; 0 disables

    def __post_init__(self):
        if not 0.0 <= self.ema < 1.0:
            raise ValueError("ema decay must lie in [0, 1)")
        if self.mode not in ("ncsn", "vp"):
            raise ValueError(f"unknown score training mode {self.mode!r}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")

    def ladder(self) -> NoiseLadder:
        return NoiseLadder.geometric(self.sigma_max, self.sigma_min, self.n_scales)

    def sde(self) -> SDEConfig:
        return SDEConfig(self.beta_min, self.beta_max)

    def to_dict(self):
        d = dict(self.__dict__)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class ScoreResult:
    net: ScoreNet
    losses: np.ndarray


def train_score(config: ScoreConfig, data, rng: RngStream) -> ScoreResult:
    """Adam on the NCSN or VP denoising objective with minibatches drawn from ``data``."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    n, d = data.shape
    net = ScoreNet.create(d, config.hidden, config.activation, rng)
    opt = Adam(cosine_decay(config.lr, config.steps, config.lr_floor))
    ladder, sde = config.ladder(), config.sde()
    theta = net.params.copy()
    avg = theta.copy()
    losses = np.empty(config.steps)
    for t in range(1, config.steps + 1):
        batch = data[rng.integers(0, n, min(config.batch_size, n))]
        if config.mode == "ncsn":
            eps = rng.normal((len(ladder), len(batch), d))
            val, g = value_and_grad(lambda th: ncsn_loss(net, batch, ladder, eps=eps, theta=th), theta)
        else:
            tt = rng.uniform(sde.t_eps, 1.0, len(batch))
            eps = rng.normal(batch.shape)
            val, g = value_and_grad(lambda th: vp_dsm_loss(net, batch, sde, t=tt, eps=eps, theta=th), theta)
        losses[t - 1] = val
        theta = opt.step(theta, g)
        check_state(theta, t)
        avg = config.ema * avg + (1.0 - config.ema) * theta
    return ScoreResult(ScoreNet(net.arch, avg if config.ema > 0 else theta), losses)
