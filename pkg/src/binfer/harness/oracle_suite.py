"""Self-tests of the closed-form oracles. Nothing here touches a trainer."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import _kernels
from ..diffcore import RngStream
from . import oracles


@dataclass
class OracleCheck:
    name: str
    passed: bool
    detail: str = ""


def _blr_prior_recovery():
    mean, cov, ev = oracles.exact_blr_posterior(np.zeros((0, 3)), np.zeros(0), 0.5, 2.0)
    ok = np.allclose(mean, 0) and np.allclose(cov, 4.0 * np.eye(3)) and ev == 0.0
    return ok, f"evidence={ev}"


def _blr_hand_case():
    mean, cov, _ = oracles.exact_blr_posterior(np.array([[1.0]]), np.array([1.0]), 1.0, 1.0)
    return abs(mean[0] - 0.5) < 1e-15 and abs(cov[0, 0] - 0.5) < 1e-15, f"mean={mean[0]}, var={cov[0, 0]}"


def _blr_consistency():
    rng = RngStream(11)
    w = np.array([1.0, -2.0, 0.5])
    X = rng.normal((10_000, 3))
    y = X @ w + 0.3 * rng.normal(10_000)
    mean, _, _ = oracles.exact_blr_posterior(X, y, 0.3, 1.0)
    ls = np.linalg.lstsq(X, y, rcond=None)[0]
    err = np.max(np.abs(mean - ls) / np.abs(ls))
    return err < 0.01, f"max rel diff to least squares {err:.2e}"


def _blr_evidence_brute_force():
    # evidence from the Gaussian marginal vs the product rule p(y) = p(y|w) p(w) / p(w|y)
    rng = RngStream(12)
    X, y = rng.normal((6, 2)), rng.normal(6)
    sigma, tau = 0.7, 1.3
    mean, cov, ev = oracles.exact_blr_posterior(X, y, sigma, tau)
    w = rng.normal(2)
    lik = oracles.gaussian_logpdf(y, X @ w, sigma ** 2 * np.eye(6))
    prior = oracles.gaussian_logpdf(w, np.zeros(2), tau ** 2 * np.eye(2))
    post = oracles.gaussian_logpdf(w, mean, cov)
    return abs(ev - (lik + prior - post)) < 1e-10, f"evidence {ev:.6f}"


def _mf_corr():
    v = oracles.mf_fixed_point_oracle([[2.0, 1.5], [1.5, 1.6]])
    return np.allclose(v, [0.59375, 0.475], atol=1e-14), f"variances {v}"


def _mf_diagonal():
    v = oracles.mf_fixed_point_oracle(np.diag([0.5, 2.0, 3.0]))
    return np.allclose(v, [0.5, 2.0, 3.0]), f"variances {v}"


def _mf_underestimates():
    rng = RngStream(13)
    for _ in range(100):
        a = rng.normal((4, 4))
        cov = a @ a.T + 0.1 * np.eye(4)
        if np.any(oracles.mf_fixed_point_oracle(cov) > np.diag(cov) * (1 + 1e-12)):
            return False, "found v_i > cov_ii"
    return True, "100 random SPD matrices"


def _ppca_posterior():
    # brute-force Gaussian conditioning on the joint of (z, x)
    W = np.array([[1.0, 0.3], [0.5, -1.0], [0.2, 0.4]])
    b, sigma = np.array([0.1, -0.2, 0.3]), 0.6
    x = np.array([0.7, -0.1, 1.2])
    m, S = oracles.ppca_posterior(W, b, sigma, x)
    Cxx = W @ W.T + sigma ** 2 * np.eye(3)
    m_ref = W.T @ np.linalg.solve(Cxx, x - b)
    S_ref = np.eye(2) - W.T @ np.linalg.solve(Cxx, W)
    ok = np.allclose(m, m_ref, atol=1e-12) and np.allclose(S, S_ref, atol=1e-12)
    return ok, "joint-Gaussian conditioning"


def _ppca_mle():
    rng = RngStream(14)
    W = np.array([[2.0], [1.0], [0.5]])
    X = rng.normal((20_000, 1)) @ W.T + 0.3 * rng.normal((20_000, 3))
    W_hat, _, s = oracles.ppca_mle(X, 1)
    cov_err = np.max(np.abs(W_hat @ W_hat.T - W @ W.T))
    return cov_err < 0.1 and abs(s - 0.3) < 0.02, f"WW^T err {cov_err:.3f}, sigma {s:.3f}"


def _grid_gaussian():
    g = oracles.grid_normalize(lambda x: 0.5 * x[:, 0] ** 2, (-8.0, 8.0), 2048)
    ref = np.exp(-0.5 * g.grid ** 2) / math.sqrt(2 * math.pi)
    err = np.max(np.abs(g.density - ref))
    return err < 1e-4 and abs(g.integral() - 1.0) < 1e-6, f"max abs err {err:.2e}"


def _grid_flat():
    g = oracles.grid_normalize(lambda x: np.zeros(len(x)), (-2.0, 3.0), 101)
    return np.allclose(g.density, 0.2), "uniform density"


def _grid_order():
    # normalization error of the unshifted trapezoid sum falls ~4x per halving
    def err(n):
        xs = np.linspace(-1.0, 2.0, n)
        return abs(_kernels.trapezoid(np.exp(xs), 3.0 / (n - 1)) - (math.e ** 2 - math.exp(-1)))
    ratio = err(101) / err(201)
    return 3.8 < ratio < 4.2, f"ratio {ratio:.3f}"


def _grid_2d():
    cov = np.array([[1.0, 0.4], [0.4, 0.8]])
    prec = np.linalg.inv(cov)
    g = oracles.grid_normalize(lambda x: 0.5 * np.einsum("ij,jk,ik->i", x, prec, x),
                               ((-7.0, 7.0), (-7.0, 7.0)), 301)
    ref = -0.5 * np.linalg.slogdet(cov)[1] - math.log(2 * math.pi)
    return abs(g.log_z + ref) < 1e-6 and abs(g.integral() - 1.0) < 1e-6, f"log Z {g.log_z:.8f}"


CHECKS: dict[str, Callable] = {
    "blr_prior_recovery": _blr_prior_recovery,
    "blr_hand_case": _blr_hand_case,
    "blr_least_squares_limit": _blr_consistency,
    "blr_evidence_identity": _blr_evidence_brute_force,
    "mf_fixed_point_corr": _mf_corr,
    "mf_fixed_point_diagonal": _mf_diagonal,
    "mf_fixed_point_underestimates": _mf_underestimates,
    "ppca_posterior_conditioning": _ppca_posterior,
    "ppca_mle_recovery": _ppca_mle,
    "grid_gaussian_pdf": _grid_gaussian,
    "grid_flat_energy": _grid_flat,
    "grid_trapezoid_order": _grid_order,
    "grid_2d_log_z": _grid_2d,
}


def run_oracle_suite() -> list[OracleCheck]:
    out = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as e:  # a crashing oracle is a failed oracle
            ok, detail = False, f"{type(e).__name__}: {e}"
        out.append(OracleCheck(name, bool(ok), detail))
    return out
