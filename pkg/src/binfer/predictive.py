"""Posterior predictive estimates and the entropy-based uncertainty split."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .diffcore import RngStream
from .nets import BNN, CategoricalLikelihood, GaussianLikelihood
from .sgmcmc import Chain
from .vi import Family, sample_q


@dataclass
class PosteriorHandle:
    """Either a stored chain or a variational q with ``n_draws`` Monte Carlo members."""

    kind: str
    chain: Chain | None = None
    q: Family | None = None
    n_draws: int = 100
    rng: RngStream | None = None

    def __post_init__(self):
        if self.kind == "chain":
            if self.chain is None or len(self.chain) == 0:
                raise ValueError("empty posterior: chain has no samples")
        elif self.kind == "variational":
            if self.q is None or self.rng is None:
                raise ValueError("variational handle needs q and rng")
            if self.n_draws < 1:
                raise ValueError("need at least one draw")
        else:
            raise ValueError(f"unknown posterior kind {self.kind!r}")

    @classmethod
    def from_chain(cls, chain: Chain):
        return cls("chain", chain=chain)

    @classmethod
    def from_q(cls, q: Family, n_draws: int, rng: RngStream):
        return cls("variational", q=q, n_draws=n_draws, rng=rng)

    def members(self) -> np.ndarray:
        if self.kind == "chain":
            return self.chain.samples
        return sample_q(self.q, self.rng, self.n_draws)[0]


@dataclass
class PredictiveSummary:
    """Regression fills mean/variance; classification fills probs and the entropies."""

    mean: np.ndarray | None = None  # (n, d_out)
    variance: np.ndarray | None = None
    probs: np.ndarray | None = None  # (n, C)
    total: np.ndarray | None = None  # (n,)
    aleatoric: np.ndarray | None = None
    epistemic: np.ndarray | None = None
    mi_kl: np.ndarray | None = None


def decompose_uncertainty(member_probs, tol: float = 1e-9):
    """Split predictive entropy of an ensemble into aleatoric and epistemic parts.

    Returns (total, aleatoric, epistemic, mi_kl) in nats. ``mi_kl`` is the
    mean KL from each member to the ensemble mean, an independent route to
    the mutual information.
    """
    p = np.asarray(member_probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1:
        raise ValueError("member_probs must be a non-empty M x C matrix")
    if np.any(p < 0) or np.any(np.abs(p.sum(1) - 1.0) > tol):
        raise ValueError("rows must be probability vectors")
    pbar = p.mean(0)
    total = float(_kernels.row_entropy(pbar[None, :])[0])
    aleatoric = float(_kernels.row_entropy(p).mean())
    epistemic = total - aleatoric
    mi_kl = float(_kernels.row_kl(p, np.broadcast_to(pbar, p.shape)).mean())
    return total, aleatoric, epistemic, mi_kl


def _softmax(f):
    z = f - f.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def posterior_predictive(h: PosteriorHandle, model: BNN, x_star) -> PredictiveSummary:
    """Monte Carlo predictive over the handle's members at inputs ``x_star``."""
    x_star = np.atleast_2d(np.asarray(x_star, dtype=np.float64))
    thetas = h.members()
    outs = np.stack([np.asarray(model.forward(th, x_star)) for th in thetas])  # (M, n, d_out)
    lik = model.likelihood
    if isinstance(lik, GaussianLikelihood):
        mean = outs.mean(0)
        var = lik.sigma ** 2 + outs.var(0)
        return PredictiveSummary(mean=mean, variance=var)
    if isinstance(lik, CategoricalLikelihood):
        probs = _softmax(outs)  # (M, n, C)
        n = x_star.shape[0]
        parts = np.array([decompose_uncertainty(probs[:, i, :]) for i in range(n)])
        return PredictiveSummary(probs=probs.mean(0), total=parts[:, 0], aleatoric=parts[:, 1],
                                 epistemic=parts[:, 2], mi_kl=parts[:, 3])
    raise TypeError(f"unsupported likelihood {type(lik).__name__}")
