"""Synthetic datasets, each a pure function of (settings, seed)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..diffcore import RngStream
from ..vi import DensityTarget, gaussian_target

# datasets draw from their own stream so experiment randomness never shifts them
DATA_STREAM = 7

CORR_MEAN = (0.0, 0.0)
CORR_COV = ((2.0, 1.5), (1.5, 1.6))


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.x)

    def pair(self):
        return self.x, self.y


def _rng(seed: int) -> RngStream:
    return RngStream(seed, DATA_STREAM)


def regression_1d(n: int, noise: float, seed: int) -> Dataset:
    """y = sin(x) + noise * eps on x ~ U(-3, 3), with x of shape (n, 1)."""
    rng = _rng(seed)
    x = rng.uniform(-3.0, 3.0, (n, 1))
    y = np.sin(x) + noise * rng.normal((n, 1))
    return Dataset(x, y)


def two_moons(n: int, noise: float, seed: int) -> Dataset:
    """Two interleaved half circles with integer labels 0/1."""
    rng = _rng(seed)
    n0 = n // 2
    t0 = np.pi * rng.random(n0)
    t1 = np.pi * rng.random(n - n0)
    upper = np.stack([np.cos(t0), np.sin(t0)], 1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], 1)
    x = np.concatenate([upper, lower]) + noise * rng.normal((n, 2))
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n - n0, dtype=np.int64)])
    perm = rng.permutation(n)
    return Dataset(x[perm], y[perm])


def gaussian_mixture_1d(weights, means, stds, n: int, seed: int) -> Dataset:
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or not np.isclose(w.sum(), 1.0):
        raise ValueError("mixture weights must be non-negative and sum to 1")
    if not (len(w) == len(means) == len(stds)):
        raise ValueError("weights, means and stds must have equal length")
    rng = _rng(seed)
    comp = np.searchsorted(np.cumsum(w), rng.random(n), side="right").clip(0, len(w) - 1)
    x = np.asarray(means, dtype=np.float64)[comp] + np.asarray(stds, dtype=np.float64)[comp] * rng.normal(n)
    return Dataset(x[:, None], None, {"weights": w.tolist(), "means": list(means), "stds": list(stds)})


def correlated_gaussian_2d(mean=CORR_MEAN, cov=CORR_COV) -> DensityTarget:
    """Unnormalized Gaussian log-density target; no data involved."""
    return gaussian_target(np.asarray(mean, dtype=np.float64), np.asarray(cov, dtype=np.float64))


def blr(n: int, d: int, sigma: float, tau: float, seed: int, true_w=None) -> Dataset:
    """Linear-Gaussian regression with d features and a bias.

    The weight vector has d + 1 entries, bias last, drawn from N(0, tau^2)
    unless given. Rows of x are standard normal.
    """
    rng = _rng(seed)
    x = rng.normal((n, d))
    w = rng.normal(d + 1) * tau if true_w is None else np.asarray(true_w, dtype=np.float64)
    if w.shape != (d + 1,):
        raise ValueError(f"true weights must have length d + 1 = {d + 1}")
    y = x @ w[:d] + w[d] + sigma * rng.normal(n)
    return Dataset(x, y[:, None], {"true_w": w.tolist()})


def design_with_bias(x) -> np.ndarray:
    """[x, 1]: the design matrix matching a linear layer's (weights, bias) order."""
    x = np.atleast_2d(x)
    return np.hstack([x, np.ones((len(x), 1))])
