"""Stochastic-gradient MCMC: SGLD, SGHMC and step-size schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels
from .diffcore import RngStream, value_and_grad
from .nets import BNN, MinibatchSampler

DIVERGENCE_LIMIT = 1e6


class DivergenceError(RuntimeError):
    """Sampler or optimizer state became non-finite or exploded."""

    def __init__(self, step: int, reason: str):
        super().__init__(f"diverged at step {step}: {reason}")
        self.step = step
        self.reason = reason


def check_state(x: np.ndarray, step: int, limit: float = DIVERGENCE_LIMIT):
    if not np.all(np.isfinite(x)):
        raise DivergenceError(step, "non-finite state")
    if x.size and np.abs(x).max() > limit:
        raise DivergenceError(step, f"|state|_inf exceeded {limit:g}")


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstantSchedule:
    alpha0: float

    def __post_init__(self):
        if not self.alpha0 > 0:
            raise ValueError("step size must be positive")

    def __call__(self, t: int) -> float:
        if t < 1:
            raise ValueError("steps are 1-based")
        return self.alpha0

    def to_dict(self):
        return {"kind": "constant", "alpha0": self.alpha0}


@dataclass(frozen=True)
class PolynomialSchedule:
    """alpha_t = a (b + t)^-gamma; gamma in (0.5, 1] gives sum = inf, sum sq < inf."""

    a: float
    b: float = 0.0
    gamma: float = 0.55

    def __post_init__(self):
        if not self.a > 0 or self.b < 0:
            raise ValueError("need a > 0 and b >= 0")
        if not 0.5 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0.5, 1]")

    def __call__(self, t: int) -> float:
        if t < 1:
            raise ValueError("steps are 1-based")
        return self.a * (self.b + t) ** (-self.gamma)

    def to_dict(self):
        return {"kind": "polynomial", "a": self.a, "b": self.b, "gamma": self.gamma}


@dataclass(frozen=True)
class CyclicalSchedule:
    """Cosine cycles: alpha_t = alpha0/2 [cos(pi mod(t-1, P) / P) + 1], P = ceil(T/M)."""

    alpha0: float
    n_cycles: int
    total_steps: int

    def __post_init__(self):
        if not self.alpha0 > 0 or self.n_cycles < 1 or self.total_steps < 1:
            raise ValueError("need alpha0 > 0, n_cycles >= 1, total_steps >= 1")

    @property
    def period(self) -> int:
        return math.ceil(self.total_steps / self.n_cycles)

    def __call__(self, t: int) -> float:
        if not 1 <= t <= self.total_steps:
            raise ValueError(f"step {t} outside [1, {self.total_steps}]")
        p = self.period
        return self.alpha0 / 2.0 * (math.cos(math.pi * ((t - 1) % p) / p) + 1.0)

    def to_dict(self):
        return {"kind": "cyclical", "alpha0": self.alpha0, "n_cycles": self.n_cycles,
                "total_steps": self.total_steps}


Schedule = ConstantSchedule | PolynomialSchedule | CyclicalSchedule


def schedule_from_dict(d: dict) -> Schedule:
    kind = d["kind"]
    args = {k: v for k, v in d.items() if k != "kind"}
    if kind == "constant":
        return ConstantSchedule(**args)
    if kind == "polynomial":
        return PolynomialSchedule(**args)
    if kind == "cyclical":
        return CyclicalSchedule(**args)
    raise ValueError(f"unknown schedule kind {kind!r}")


def schedule_step(sched: Schedule, t: int) -> float:
    return sched(t)


# ---------------------------------------------------------------------------
# single-step updates
# ---------------------------------------------------------------------------

def sgld_step(theta, grad, alpha: float, rng: RngStream | None = None, eps=None) -> np.ndarray:
    """theta - alpha grad + sqrt(2 alpha) eps, eps ~ N(0, I).

    Exactly one normal draw of theta's shape is taken from ``rng`` unless
    ``eps`` is supplied.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if not alpha > 0:
        raise ValueError("step size must be positive")
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    if eps is None:
        eps = rng.normal(theta.shape)
    return _kernels.sgld_update(theta, grad, alpha, eps)


@dataclass(frozen=True)
class SGHMCConfig:
    friction: float = 1.0
    mass: float = 1.0

    def __post_init__(self):
        if not self.friction > 0 or not self.mass > 0:
            raise ValueError("friction and mass must be positive")


@dataclass
class SGHMCState:
    theta: np.ndarray
    momentum: np.ndarray

    def __post_init__(self):
        if np.shape(self.theta) != np.shape(self.momentum):
            raise ValueError("theta and momentum dimensions differ")


def sghmc_step(state: SGHMCState, grad, cfg: SGHMCConfig, alpha: float,
               rng: RngStream | None = None, eps=None, friction: float | None = None) -> SGHMCState:
    """Euler step: r <- r - a grad - a C r/m + N(0, 2 a C); theta <- theta + a r/m.

    ``friction`` overrides ``cfg.friction`` (C = 0 gives frictionless drift).
    """
    c = cfg.friction if friction is None else friction
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    if eps is None:
        eps = rng.normal(np.shape(state.theta))
    theta, r = _kernels.sghmc_update(state.theta, state.momentum, grad, alpha, c, cfg.mass, eps)
    return SGHMCState(theta, r)


# ---------------------------------------------------------------------------
# chains
# ---------------------------------------------------------------------------

@dataclass
class Chain:
    """Stored posterior samples plus bookkeeping."""

    samples: np.ndarray  # (count, dim)
    step_indices: np.ndarray
    burn_in: int
    thin: int
    meta: dict = field(default_factory=dict)
    energies: np.ndarray | None = None  # per-step minibatch energy

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def __len__(self):
        return len(self.samples)

    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    def cov(self) -> np.ndarray:
        return np.atleast_2d(np.cov(self.samples, rowvar=False))


@dataclass(frozen=True)
class SamplerConfig:
    """Settings for :func:`run_chain`. ``burn_in=None`` means T // 5."""

    kind: str = "sgld"
    batch_size: int | None = None
    burn_in: int | None = None
    thin: int = 10
    friction: float = 1.0
    mass: float = 1.0
    collect_below: float | None = 0.1  # cyclical only: collect when alpha_t < this * alpha0

    def __post_init__(self):
        if self.kind not in ("sgld", "sghmc"):
            raise ValueError(f"unknown sampler {self.kind!r}")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")

    def to_dict(self):
        return dict(self.__dict__)


def _collect(t, burn_in, thin, sched, collect_below) -> bool:
    if t < burn_in or (t - burn_in) % thin:
        return False
    if isinstance(sched, CyclicalSchedule) and collect_below is not None:
        return sched(t) < collect_below * sched.alpha0
    return True


def run_chain(model: BNN, data, config: SamplerConfig, schedule: Schedule, n_steps: int,
              rng: RngStream, theta0=None, energy_grad: Callable | None = None) -> Chain:
    """Minibatch SG-MCMC loop over ``n_steps`` updates.

    Each step draws a minibatch, differentiates the minibatch energy on a
    tape and applies one SGLD or SGHMC update with step ``schedule(t)``.
    ``data`` is an (x, y) pair; an empty ``x`` samples the prior.
    ``energy_grad(theta, batch_idx) -> (U, grad)`` replaces autodiff if given.
    """
    x, y = data
    n = len(x)
    burn_in = n_steps // 5 if config.burn_in is None else config.burn_in
    batcher = MinibatchSampler(n, config.batch_size, rng)
    theta = model.init_params(rng) if theta0 is None else np.array(theta0, dtype=np.float64)
    sghmc = SGHMCConfig(config.friction, config.mass) if config.kind == "sghmc" else None
    if sghmc is not None:
        r = math.sqrt(sghmc.mass) * rng.normal(theta.shape)
        state = SGHMCState(theta, r)

    if energy_grad is None:
        def energy_grad(th, idx):
            batch = (x[idx], y[idx]) if n else None
            return value_and_grad(lambda t: model.energy(t, batch, n), th)

    energies = np.empty(n_steps)
    samples, indices = [], []
    for t in range(1, n_steps + 1):
        alpha = schedule(t)
        idx = batcher.next() if n else None
        u, g = energy_grad(theta, idx)
        energies[t - 1] = u
        if sghmc is None:
            theta = sgld_step(theta, g, alpha, rng)
        else:
            state = sghmc_step(state, g, sghmc, alpha, rng)
            theta = state.theta
        check_state(theta, t)
        if _collect(t, burn_in, config.thin, schedule, config.collect_below):
            samples.append(theta.copy())
            indices.append(t)

    dim = theta.size
    meta = {"sampler": config.to_dict(), "schedule": schedule.to_dict(), "n_steps": n_steps,
            "seed": rng.seed, "stream_id": rng.stream_id, "burn_in": burn_in}
    return Chain(np.array(samples).reshape(-1, dim), np.array(indices, dtype=np.int64),
                 burn_in, config.thin, meta, energies)
