"""Closed-form reference answers used to validate every trainer."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import _kernels

LOG_2PI = math.log(2.0 * math.pi)


def exact_blr_posterior(X, y, sigma: float, tau: float):
    """Posterior N(mean, cov) of w under y = X w + N(0, sigma^2), w ~ N(0, tau^2 I).

    Returns (mean, cov, log evidence). With no rows the evidence is 0.
    """
    if not (sigma > 0 and tau > 0):
        raise ValueError("sigma and tau must be positive")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n, d = X.shape
    prec = X.T @ X / sigma ** 2 + np.eye(d) / tau ** 2
    chol = np.linalg.cholesky(prec)
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (X.T @ y) / sigma ** 2
    if n == 0:
        return mean, cov, 0.0
    # y ~ N(0, sigma^2 I + tau^2 X X^T)
    marg = sigma ** 2 * np.eye(n) + tau ** 2 * X @ X.T
    return mean, cov, gaussian_logpdf(y, np.zeros(n), marg)


def blr_predictive(X_star, mean, cov, sigma: float):
    """Closed-form predictive mean and variance of y* = x*^T w + noise."""
    X_star = np.atleast_2d(X_star)
    return X_star @ mean, np.einsum("ij,jk,ik->i", X_star, cov, X_star) + sigma ** 2


def gaussian_logpdf(x, mean, cov) -> float:
    """Dense multivariate normal log density via Cholesky."""
    x = np.asarray(x, dtype=np.float64) - mean
    chol = np.linalg.cholesky(np.asarray(cov, dtype=np.float64))
    z = np.linalg.solve(chol, x)
    return float(-0.5 * z @ z - np.log(np.diag(chol)).sum() - 0.5 * x.size * LOG_2PI)


def mf_fixed_point_oracle(cov) -> np.ndarray:
    """Exclusive-KL mean-field variances for a Gaussian target: 1 / (cov^-1)_ii."""
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T):
        raise ValueError("covariance must be a symmetric matrix")
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError("covariance is not positive definite") from None
    return 1.0 / np.diag(np.linalg.inv(cov))


def renyi_mf_optimum(cov, alpha: float, n_grid: int = 401) -> np.ndarray:
    """Zero-mean mean-field Gaussian maximizing the Renyi alpha bound for N(0, cov).

    Uses the closed-form Renyi divergence between Gaussians and a coarse-to-fine
    search over log variances (2-D targets only).
    """
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape != (2, 2):
        raise ValueError("only 2-D targets are supported")
    prec = np.linalg.inv(cov)

    def div(v):
        # D_a(q||p) for q = N(0, diag v), p = N(0, cov)
        qprec = np.diag(1.0 / v)
        mix = alpha * qprec + (1.0 - alpha) * prec
        sign, ld_mix = np.linalg.slogdet(mix)
        if sign <= 0:
            return np.inf
        ld_q = np.log(v).sum()
        ld_p = np.linalg.slogdet(cov)[1]
        # log int q^a p^(1-a) = -0.5 [ld_mix + a ld_q + (1-a) ld_p]
        return -0.5 * (ld_mix + alpha * ld_q + (1.0 - alpha) * ld_p) / (alpha - 1.0)

    lo, hi = np.log(np.diag(cov)) - 3.0, np.log(np.diag(cov)) + 1.0
    best = None
    for _ in range(4):
        g0 = np.linspace(lo[0], hi[0], n_grid // 4 + 1)
        g1 = np.linspace(lo[1], hi[1], n_grid // 4 + 1)
        vals = np.array([[div(np.exp([a, b])) for b in g1] for a in g0])
        i, j = np.unravel_index(np.argmin(vals), vals.shape)
        best = np.array([g0[i], g1[j]])
        w = (hi - lo) / 8.0
        lo, hi = best - w, best + w
    return np.exp(best)


def ppca_posterior(W, b, sigma: float, x):
    """Exact p(z | x) = N(m, S) with precision I + W^T W / sigma^2."""
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    prec = np.eye(W.shape[1]) + W.T @ W / sigma ** 2
    S = np.linalg.inv(prec)
    m = (S @ W.T @ (np.asarray(x, dtype=np.float64) - b).T / sigma ** 2).T
    return m, S


def ppca_mle(X, d_z: int, sigma: float | None = None):
    """Tipping-Bishop closed-form MLE (W, b, sigma); sigma fixed when given."""
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    b = X.mean(0)
    S = np.cov(X, rowvar=False, bias=True)
    evals, evecs = np.linalg.eigh(S)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    if sigma is None:
        sigma = math.sqrt(evals[d_z:].mean()) if d > d_z else 1e-6
    scale = np.sqrt(np.maximum(evals[:d_z] - sigma ** 2, 0.0))
    return evecs[:, :d_z] * scale, b, sigma


@dataclass
class GridDensity:
    grid: np.ndarray  # (n,) for 1-D, (n, n, 2) for 2-D
    energy: np.ndarray
    density: np.ndarray
    log_z: float
    spacing: float | tuple

    def integral(self) -> float:
        if self.density.ndim == 1:
            return _kernels.trapezoid(self.density, self.spacing)
        dx, dy = self.spacing
        inner = np.array([_kernels.trapezoid(row, dy) for row in self.density])
        return _kernels.trapezoid(inner, dx)


def grid_normalize(energy_fn, box, n_points: int = 2048) -> GridDensity:
    """Trapezoid-rule normalization of exp(-E) over a 1-D interval or a 2-D box.

    ``energy_fn`` maps an (m, dim) array to m energies. For 2-D, ``box`` is
    ((x_lo, x_hi), (y_lo, y_hi)) and ``n_points`` is per axis.
    """
    box = np.asarray(box, dtype=np.float64)
    if box.ndim == 1:
        lo, hi = box
        xs = np.linspace(lo, hi, n_points)
        dx = (hi - lo) / (n_points - 1)
        e = np.asarray(energy_fn(xs[:, None]), dtype=np.float64).reshape(-1)
        shift = e.min()
        u = np.exp(-(e - shift))
        z = _kernels.trapezoid(u, dx)
        return GridDensity(xs, e, u / z, math.log(z) - shift, dx)
    if box.shape == (2, 2):
        xs = np.linspace(box[0, 0], box[0, 1], n_points)
        ys = np.linspace(box[1, 0], box[1, 1], n_points)
        dx = (box[0, 1] - box[0, 0]) / (n_points - 1)
        dy = (box[1, 1] - box[1, 0]) / (n_points - 1)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel()], 1)
        e = np.asarray(energy_fn(pts), dtype=np.float64).reshape(n_points, n_points)
        shift = e.min()
        u = np.exp(-(e - shift))
        inner = np.array([_kernels.trapezoid(row, dy) for row in u])
        z = _kernels.trapezoid(inner, dx)
        return GridDensity(np.stack([gx, gy], -1), e, u / z, math.log(z) - shift, (dx, dy))
    raise ValueError("grid normalization supports 1-D or 2-D boxes only")


def total_variation(p, q, dx: float) -> float:
    """0.5 * integral |p - q| on a shared uniform grid."""
    return 0.5 * _kernels.trapezoid(np.abs(np.asarray(p) - np.asarray(q)), dx)


def mixture_pdf_1d(x, weights, means, stds) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)[..., None]
    w, m, s = (np.asarray(a, dtype=np.float64) for a in (weights, means, stds))
    return (w * np.exp(-0.5 * ((x - m) / s) ** 2) / (s * math.sqrt(2 * math.pi))).sum(-1)
