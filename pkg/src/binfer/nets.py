"""Feed-forward networks, likelihoods, priors and the minibatch energy."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .diffcore import RngStream, ops

LOG_2PI = math.log(2.0 * math.pi)

_ACTIVATIONS = {"relu": ops.relu, "tanh": ops.tanh}


class LayerSlot(NamedTuple):
    w_offset: int
    w_shape: tuple[int, int]  # (fan_out, fan_in)
    b_offset: int
    b_size: int


@dataclass(frozen=True)
class Architecture:
    """Sizes [d_in, d_h, ..., d_out] of an L-layer MLP and its activation."""

    layer_sizes: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes (L >= 1)")
        if min(sizes) < 1:
            raise ValueError("layer sizes must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def d_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def d_out(self) -> int:
        return self.layer_sizes[-1]

    @cached_property
    def layout(self) -> tuple[LayerSlot, ...]:
        slots, off = [], 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            slots.append(LayerSlot(off, (fan_out, fan_in), off + fan_in * fan_out, fan_out))
            off += fan_in * fan_out + fan_out
        return tuple(slots)

    @property
    def n_params(self) -> int:
        return sum(fi * fo + fo for fi, fo in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(tuple(d["layer_sizes"]), d.get("activation", "tanh"))


@dataclass
class ParamVector:
    """Flat parameter vector with the layer layout of ``arch``."""

    values: np.ndarray
    arch: Architecture

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.arch.n_params,):
            raise ValueError(f"expected {self.arch.n_params} parameters, got {self.values.shape}")

    def unflatten(self) -> list[tuple[np.ndarray, np.ndarray]]:
        out = []
        for s in self.arch.layout:
            n_w = s.w_shape[0] * s.w_shape[1]
            out.append((self.values[s.w_offset:s.w_offset + n_w].reshape(s.w_shape).copy(),
                        self.values[s.b_offset:s.b_offset + s.b_size].copy()))
        return out

    @classmethod
    def from_layers(cls, arch: Architecture, layers) -> "ParamVector":
        flat = np.concatenate([np.concatenate([np.ravel(w), np.ravel(b)]) for w, b in layers])
        return cls(flat, arch)


def init_params(arch: Architecture, rng: RngStream) -> np.ndarray:
    """He init for relu, 1/fan_in variance for tanh; zero biases."""
    theta = np.zeros(arch.n_params)
    gain = 2.0 if arch.activation == "relu" else 1.0
    for s in arch.layout:
        fan_out, fan_in = s.w_shape
        theta[s.w_offset:s.w_offset + fan_in * fan_out] = (
            math.sqrt(gain / fan_in) * rng.normal(fan_in * fan_out))
    return theta


def _as_flat(params):
    if isinstance(params, ParamVector):
        return params.values
    return params


def mlp_forward(params, arch: Architecture, x):
    """f_theta(x): affine maps with ``arch.activation`` between them.

    ``x`` is (n, d_in) or (d_in,); the output has matching leading shape.
    """
    theta = _as_flat(params)
    if ops.value_of(theta).shape != (arch.n_params,):
        raise ValueError(f"parameter vector has shape {ops.value_of(theta).shape}, "
                         f"architecture needs ({arch.n_params},)")
    xv = ops.value_of(x)
    if xv.shape[-1] != arch.d_in:
        raise ValueError(f"input has {xv.shape[-1]} columns, expected {arch.d_in}")
    act = _ACTIVATIONS[arch.activation]
    h = x
    for li, s in enumerate(arch.layout):
        h = ops.affine(h, theta, s.w_offset, s.w_shape, s.b_offset)
        if li < arch.n_layers - 1:
            h = act(h)
    return h


# ---------------------------------------------------------------------------
# likelihoods and prior
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianLikelihood:
    """y ~ N(f_theta(x), sigma^2 I) with fixed sigma."""

    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("Gaussian likelihood sigma must be positive")

    def check(self, arch: Architecture):
        pass

    def log_prob(self, f, y):
        """Per-row log density, shape (n,)."""
        y = np.asarray(y, dtype=np.float64)
        fv = ops.value_of(f)
        if y.ndim == 1 and fv.ndim == 2:
            y = y.reshape(-1, 1)
        d = fv.shape[-1]
        resid = ops.sub(y, f)
        sq = ops.sum(ops.square(resid), axis=-1)
        return ops.sub(-0.5 * d * (LOG_2PI + 2.0 * math.log(self.sigma)),
                       ops.mul(sq, 0.5 / self.sigma ** 2))

    def to_dict(self):
        return {"kind": "gaussian", "sigma": self.sigma}


@dataclass(frozen=True)
class CategoricalLikelihood:
    """y ~ Categorical(softmax(f_theta(x))) over ``n_classes`` labels."""

    n_classes: int

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("categorical likelihood needs C >= 2")

    def check(self, arch: Architecture):
        if arch.d_out != self.n_classes:
            raise ValueError(f"d_out={arch.d_out} must equal C={self.n_classes}")

    def log_prob(self, f, y):
        y = np.asarray(y).astype(np.intp).reshape(-1)
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise IndexError("label out of range")
        logp = ops.log_softmax(f, axis=-1)
        if ops.value_of(logp).ndim == 1:
            return ops.getitem(logp, (y[0],))
        return ops.getitem(logp, (np.arange(len(y)), y))

    def to_dict(self):
        return {"kind": "categorical", "n_classes": self.n_classes}


def likelihood_from_dict(d: dict):
    if d["kind"] == "gaussian":
        return GaussianLikelihood(float(d["sigma"]))
    if d["kind"] == "categorical":
        return CategoricalLikelihood(int(d["n_classes"]))
    raise ValueError(f"unknown likelihood kind {d['kind']!r}")


@dataclass(frozen=True)
class GaussianPrior:
    """Isotropic N(0, scale^2 I) prior over all parameters."""

    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("prior scale must be positive")

    def log_prob(self, theta):
        d = ops.value_of(theta).shape[-1]
        sq = ops.sum(ops.square(theta), axis=-1)
        return ops.sub(-0.5 * d * (LOG_2PI + 2.0 * math.log(self.scale)),
                       ops.mul(sq, 0.5 / self.scale ** 2))

    def to_dict(self):
        return {"kind": "gaussian", "scale": self.scale}


def log_likelihood(params, arch: Architecture, lik, x, y):
    """Sum over rows of log p(y | x, theta)."""
    return ops.sum(lik.log_prob(mlp_forward(params, arch, x), y))


def log_prior(params, prior: GaussianPrior):
    return prior.log_prob(_as_flat(params))


def minibatch_energy(params, arch: Architecture, lik, prior: GaussianPrior, batch, n_total: int):
    """-(N/|batch|) sum_batch log p(y|x,theta) - log p(theta).

    ``batch`` is an (x, y) pair. ``n_total == 0`` means no data: the energy
    reduces to the negative log prior and ``batch`` is ignored.
    """
    theta = _as_flat(params)
    lp = log_prior(theta, prior)
    if n_total == 0:
        return ops.neg(lp)
    x, y = batch
    b = len(x)
    if b == 0:
        raise ValueError("empty minibatch")
    if n_total < b:
        raise ValueError("dataset size smaller than batch")
    ll = log_likelihood(theta, arch, lik, x, y)
    return ops.sub(ops.mul(ll, -n_total / b), lp)


@dataclass(frozen=True)
class BNN:
    """Model context bundling architecture, likelihood and prior."""

    arch: Architecture
    likelihood: GaussianLikelihood | CategoricalLikelihood
    prior: GaussianPrior = field(default_factory=GaussianPrior)

    def __post_init__(self):
        self.likelihood.check(self.arch)

    @property
    def dim(self) -> int:
        return self.arch.n_params

    def forward(self, theta, x):
        return mlp_forward(theta, self.arch, x)

    def log_likelihood(self, theta, x, y):
        return log_likelihood(theta, self.arch, self.likelihood, x, y)

    def log_prior(self, theta):
        return log_prior(theta, self.prior)

    def energy(self, theta, batch, n_total: int):
        return minibatch_energy(theta, self.arch, self.likelihood, self.prior, batch, n_total)

    def init_params(self, rng: RngStream) -> np.ndarray:
        return init_params(self.arch, rng)

    def to_dict(self) -> dict:
        return {"arch": self.arch.to_dict(), "likelihood": self.likelihood.to_dict(),
                "prior": self.prior.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "BNN":
        return cls(Architecture.from_dict(d["arch"]), likelihood_from_dict(d["likelihood"]),
                   GaussianPrior(float(d["prior"]["scale"])))


class MinibatchSampler:
    """Without-replacement batches; reshuffles when an epoch is exhausted.

    The tail of an epoch shorter than ``batch_size`` is dropped so every batch
    is a uniformly random subset of exactly ``batch_size`` points.
    """

    def __init__(self, n: int, batch_size: int | None, rng: RngStream):
        self.n = int(n)
        self.batch_size = self.n if batch_size is None else min(int(batch_size), self.n)
        if self.n > 0 and self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        self.rng = rng
        self._perm = np.empty(0, dtype=np.intp)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self.batch_size == self.n:
            return np.arange(self.n)
        if self._pos + self.batch_size > len(self._perm):
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx
