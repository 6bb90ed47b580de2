"""Energy-based models: Langevin sampling in data space and contrastive-divergence training."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels
from .diffcore import RngStream, ops, value_and_grad
from .nets import Architecture, init_params, mlp_forward
from .optim import make_optimizer
from .sgmcmc import DivergenceError, check_state

ENERGY_LIMIT = 1e6


@dataclass
class EnergyModel:
    """E_theta(x) as an MLP with scalar output, or a custom ``fn(theta, x) -> (n,)``."""

    params: np.ndarray
    arch: Architecture | None = None
    fn: Callable | None = None

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.fn is None:
            if self.arch is None:
                raise ValueError("need an architecture or a custom energy function")
            if self.arch.d_out != 1:
                raise ValueError("energy network must have a scalar output")
            if self.params.shape != (self.arch.n_params,):
                raise ValueError("parameter vector does not match the architecture")

    @classmethod
    def mlp(cls, arch: Architecture, rng: RngStream) -> "EnergyModel":
        return cls(init_params(arch, rng), arch)

    @property
    def dim(self) -> int:
        return self.arch.d_in if self.arch is not None else None

    def energy(self, x, theta=None):
        """Per-point energies, shape (n,). Differentiable in both x and theta."""
        theta = self.params if theta is None else theta
        if self.fn is not None:
            return self.fn(theta, x)
        n = ops.value_of(x).shape[0]
        return ops.reshape(mlp_forward(theta, self.arch, x), (n,))

    def __call__(self, x) -> np.ndarray:
        return np.asarray(self.energy(np.atleast_2d(np.asarray(x, dtype=np.float64))))

    def grad_x(self, x) -> np.ndarray:
        """nabla_x E at each row of x; params frozen."""
        return value_and_grad(lambda xx: ops.sum(self.energy(xx)), x)[1]

    def to_dict(self) -> dict:
        if self.arch is None:
            raise ValueError("custom energies are not serializable")
        return {"kind": "mlp_energy", "arch": self.arch.to_dict()}


def quadratic_energy(scale: float = 1.0) -> EnergyModel:
    """E(x) = ||x||^2 / (2 scale); theta = [scale]."""
    def fn(theta, x):
        return ops.div(ops.mul(ops.sum(ops.square(x), axis=-1), 0.5), ops.getitem(theta, 0))
    return EnergyModel(np.array([scale]), fn=fn)


def linear_energy(theta0: float = 0.0) -> EnergyModel:
    """E_theta(x) = theta * x for scalar data."""
    def fn(theta, x):
        return ops.mul(ops.getitem(theta, 0), ops.reshape(x, (ops.value_of(x).shape[0],)))
    return EnergyModel(np.array([theta0]), fn=fn)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def langevin_sample(model: EnergyModel, x0, steps: int, step, rng: RngStream,
                    box: tuple[float, float] | None = None, eps_fn: Callable | None = None):
    """x_{k+1} = x_k - a_k grad_x E(x_k) + sqrt(2 a_k) eps_k, optionally clamped to ``box``.

    ``step`` is a constant or a callable k -> a_k (k = 1..steps).
    """
    if steps < 1:
        raise ValueError("need at least one Langevin step")
    x = np.array(x0, dtype=np.float64)
    lo, hi = box if box is not None else (-np.inf, np.inf)
    for k in range(1, steps + 1):
        a = step(k) if callable(step) else step
        eps = rng.normal(x.shape) if eps_fn is None else eps_fn(k, x.shape)
        x = _kernels.langevin_update(x, -model.grad_x(x), a, eps, lo, hi)
        if not np.isfinite(x).all():
            raise DivergenceError(k, "non-finite Langevin state")
    return x


def cd_gradient(model: EnergyModel, batch, negatives, theta=None, weights=None) -> np.ndarray:
    """mean grad_theta E(x~) - mean grad_theta E(x+): an estimate of grad log p_theta.

    ``weights`` (summing to one) replace the uniform average over negatives.
    """
    pos = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    neg = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if pos.shape[1:] != neg.shape[1:]:
        raise ValueError(f"data dimension mismatch: {pos.shape} vs {neg.shape}")
    theta = model.params if theta is None else theta

    def gap(th):
        return ops.sub(_neg_phase(model.energy(neg, th), weights), ops.mean(model.energy(pos, th)))

    return value_and_grad(gap, theta)[1]


def _neg_phase(energies, weights):
    return ops.mean(energies) if weights is None else ops.sum(ops.mul(energies, weights))


class SampleBuffer:
    """FIFO store of past negative samples for persistent initialization."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity, self.dim = capacity, dim
        self._items: deque = deque(maxlen=capacity)

    def __len__(self):
        return len(self._items)

    def push(self, xs):
        xs = np.atleast_2d(xs)
        if xs.shape[1] != self.dim:
            raise ValueError("sample dimension does not match the buffer")
        for row in xs:
            self._items.append(row.copy())

    def sample(self, n: int, rng: RngStream) -> np.ndarray:
        """Draw without replacement while the buffer holds enough points.

        Drawing with replacement would let copies of a few chains take over
        the buffer over time, fixing all negatives in one mode.
        """
        m = len(self._items)
        idx = rng.choice(m, n, replace=n > m)
        return np.array([self._items[i] for i in idx])


@dataclass(frozen=True)
class InitStrategy:
    """Where negative chains start: data points, fresh noise, or a persistent buffer."""

    kind: str = "data"
    noise: str = "uniform"
    reinit_prob: float = 0.05
    capacity: int | None = None  # None: one slot per negative chain

    def __post_init__(self):
        if self.kind not in ("data", "noise", "persistent"):
            raise ValueError(f"unknown init strategy {self.kind!r}")
        if self.noise not in ("uniform", "gaussian"):
            raise ValueError(f"unknown noise kind {self.noise!r}")
        if not 0.0 <= self.reinit_prob <= 1.0:
            raise ValueError("reinit_prob must lie in [0, 1]")


def _noise_init(strategy: InitStrategy, n: int, dim: int, box, rng: RngStream):
    if strategy.noise == "uniform":
        lo, hi = box if box is not None else (-1.0, 1.0)
        return rng.uniform(lo, hi, (n, dim))
    return rng.normal((n, dim))


def initial_negatives(strategy: InitStrategy, pos, box, rng: RngStream, buffer: SampleBuffer | None):
    n, dim = pos.shape
    if strategy.kind == "data":
        return pos.copy()
    fresh = _noise_init(strategy, n, dim, box, rng)
    if strategy.kind == "noise" or buffer is None or len(buffer) == 0:
        return fresh
    old = buffer.sample(n, rng)
    keep = rng.random(n) >= strategy.reinit_prob
    return np.where(keep[:, None], old, fresh)


def annealing_temperatures(t0: float, steps: int) -> np.ndarray:
    """Geometric cooling from t0 to 1 over the first 3/4 of a chain, then T = 1.

    Hot early steps let chains cross energy barriers between modes, so the
    negatives carry information about relative mode mass.
    """
    k = np.arange(1, steps + 1)
    frac = np.clip(1.0 - k / (0.75 * steps), 0.0, 1.0)
    return t0 ** frac


def ais_negatives(model: EnergyModel, x0, temps, step: float, rng: RngStream, box: tuple[float, float]):
    """Annealed Langevin chains from uniform x0 on ``box`` with importance log-weights.

    Intermediate targets are exp(-E / T_k) on the box, starting from the flat
    density (T = inf). The weights correct for chains that have not equilibrated,
    which is what fixes the relative mass of separated modes.
    """
    betas = np.concatenate([[0.0], 1.0 / np.asarray(temps, dtype=np.float64)])
    x = np.array(x0, dtype=np.float64)
    log_w = np.zeros(len(x))
    lo, hi = box
    for k in range(1, len(betas)):
        log_w -= (betas[k] - betas[k - 1]) * np.asarray(model.energy(x))
        eps = math.sqrt(1.0 / betas[k]) * rng.normal(x.shape)
        x = _kernels.langevin_update(x, -model.grad_x(x), step, eps, lo, hi)
        if not np.isfinite(x).all():
            raise DivergenceError(k, "non-finite Langevin state")
    return x, log_w


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EBMConfig:
    layer_sizes: tuple = (1, 32, 32, 1)
    activation: str = "tanh"
    steps: int = 2000
    batch_size: int = 128
    langevin_steps: int = 60
    langevin_alpha: float = 0.01
    lr: float = 1e-3
    optimizer: str = "adam"
    init: InitStrategy = field(default_factory=InitStrategy)
    box: tuple | None = (-6.0, 6.0)
    energy_l2: float = 0.0  # optional penalty l2 * mean(E+^2 + E-^2)
    anneal_t0: float = 1.0  # > 1: negative chains start hot and cool to T = 1
    ais: bool = False  # importance-weight annealed negatives; needs uniform noise init on a box

    def __post_init__(self):
        if self.langevin_steps < 1 or self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps, langevin_steps and batch_size must be >= 1")
        if self.layer_sizes[-1] != 1:
            raise ValueError("energy network must have a scalar output")
        if self.anneal_t0 < 1.0:
            raise ValueError("anneal_t0 must be >= 1")
        if self.ais and (self.init.kind != "noise" or self.init.noise != "uniform" or self.box is None):
            raise ValueError("ais needs uniform noise init and a box")

    def to_dict(self):
        d = dict(self.__dict__)
        d["init"] = dict(self.init.__dict__)
        d["layer_sizes"] = list(self.layer_sizes)
        d["box"] = None if self.box is None else list(self.box)
        return d


@dataclass
class EBMResult:
    model: EnergyModel
    metrics: dict  # name -> per-step array


def train_ebm(config: EBMConfig, data, rng: RngStream, model: EnergyModel | None = None) -> EBMResult:
    """Contrastive-divergence loop: init negatives, K Langevin steps, CD gradient, optimizer step."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.shape[0] == 1 and data.shape[1] != config.layer_sizes[0]:
        data = data.T
    if model is None:
        model = EnergyModel.mlp(Architecture(tuple(config.layer_sizes), config.activation), rng)
    n, dim = data.shape
    opt = make_optimizer(config.optimizer, config.lr)
    buffer = None
    if config.init.kind == "persistent":
        buffer = SampleBuffer(config.init.capacity or config.batch_size, dim)
    theta = model.params.copy()
    temps = annealing_temperatures(config.anneal_t0, config.langevin_steps)
    noise = None
    if config.anneal_t0 > 1.0 and not config.ais:
        def noise(k, shape):
            return math.sqrt(temps[k - 1]) * rng.normal(shape)
    gaps = np.empty(config.steps)
    e_pos = np.empty(config.steps)
    ess = np.empty(config.steps)
    for t in range(1, config.steps + 1):
        pos = data[rng.integers(0, n, min(config.batch_size, n))]
        x0 = initial_negatives(config.init, pos, config.box, rng, buffer)
        cur = EnergyModel(theta, model.arch, model.fn)
        w = None
        if config.ais:
            neg, log_w = ais_negatives(cur, x0, temps, config.langevin_alpha, rng, config.box)
            w = np.exp(log_w - log_w.max())
            w /= w.sum()
            ess[t - 1] = 1.0 / np.sum(w * w)
        else:
            neg = langevin_sample(cur, x0, config.langevin_steps, config.langevin_alpha, rng, config.box,
                                  eps_fn=noise)
            ess[t - 1] = len(neg)
        if buffer is not None:
            buffer.push(neg)

        def loss(th):
            ep, en = cur.energy(pos, th), cur.energy(neg, th)
            out = ops.sub(ops.mean(ep), _neg_phase(en, w))
            if config.energy_l2 > 0:
                reg = ops.add(ops.mean(ops.square(ep)), ops.mean(ops.square(en)))
                out = ops.add(out, ops.mul(reg, config.energy_l2))
            return out

        val, g = value_and_grad(loss, theta)
        gaps[t - 1] = val
        ep = np.asarray(cur.energy(pos))
        e_pos[t - 1] = ep.mean()
        if np.abs(ep).max() > ENERGY_LIMIT:
            raise DivergenceError(t, "energy magnitude exceeded limit")
        theta = opt.step(theta, g)
        check_state(theta, t)
    model = EnergyModel(theta, model.arch, model.fn)
    return EBMResult(model, {"cd_gap": gaps, "energy_pos": e_pos, "neg_ess": ess})
