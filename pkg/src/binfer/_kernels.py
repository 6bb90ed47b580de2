"""Hot elementwise kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and ``BINFER_DISABLE_NUMBA``
is unset (or ``0``). Both paths take the same pre-drawn noise, so they agree
to the last ulp or so; a given backend is bit-reproducible.

Every public kernel operates on contiguous float64 arrays of any shape.
"""
from __future__ import annotations

import math
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_DISABLED = os.environ.get("BINFER_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")
NUMBA_ENABLED = numba is not None and not _DISABLED

__all__ = [
    "NUMBA_ENABLED",
    "backend_name",
    "sgld_update",
    "sghmc_update",
    "langevin_update",
    "vp_forward_step",
    "vp_reverse_step",
    "trapezoid",
    "row_entropy",
    "row_kl",
]


def backend_name() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------

def _sgld_update_np(theta, grad, alpha, eps):
    return theta - alpha * grad + math.sqrt(2.0 * alpha) * eps


def _sghmc_update_np(theta, r, grad, alpha, friction, mass, eps):
    r_new = r - alpha * grad - (alpha * friction) * r / mass + math.sqrt(2.0 * alpha * friction) * eps
    theta_new = theta + alpha * r_new / mass
    return theta_new, r_new


def _langevin_update_np(x, drift, alpha, eps, lo, hi):
    out = x + alpha * drift + math.sqrt(2.0 * alpha) * eps
    if lo > -np.inf or hi < np.inf:
        np.clip(out, lo, hi, out=out)
    return out


def _vp_forward_step_np(x, beta, dt, z):
    return x - 0.5 * beta * x * dt + math.sqrt(beta * dt) * z


def _vp_reverse_step_np(x, score, beta, dt, z):
    # Euler-Maruyama with negative time increment of size dt
    return x + (0.5 * beta * x + beta * score) * dt + math.sqrt(beta * dt) * z


def _trapezoid_np(y, dx):
    return dx * (y.sum() - 0.5 * (y[0] + y[-1]))


def _row_entropy_np(p):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0.0, p * np.log(p), 0.0)
    return -t.sum(axis=1)


def _row_kl_np(p, q):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0.0, p * (np.log(p) - np.log(q)), 0.0)
    return t.sum(axis=1)


# ---------------------------------------------------------------------------
# numba kernels (flat 1-D / 2-D loops)
# ---------------------------------------------------------------------------

if numba is not None:
    _jit = numba.njit(cache=True, nogil=True)

    @_jit
    def _sgld_update_nb(theta, grad, alpha, eps):
        out = np.empty_like(theta)
        c = math.sqrt(2.0 * alpha)
        for i in range(theta.size):
            out[i] = theta[i] - alpha * grad[i] + c * eps[i]
        return out

    @_jit
    def _sghmc_update_nb(theta, r, grad, alpha, friction, mass, eps):
        th = np.empty_like(theta)
        rn = np.empty_like(r)
        af = alpha * friction
        c = math.sqrt(2.0 * alpha * friction)
        for i in range(theta.size):
            v = r[i] - alpha * grad[i] - af * r[i] / mass + c * eps[i]
            rn[i] = v
            th[i] = theta[i] + alpha * v / mass
        return th, rn

    @_jit
    def _langevin_update_nb(x, drift, alpha, eps, lo, hi):
        out = np.empty_like(x)
        c = math.sqrt(2.0 * alpha)
        for i in range(x.size):
            v = x[i] + alpha * drift[i] + c * eps[i]
            if v < lo:
                v = lo
            elif v > hi:
                v = hi
            out[i] = v
        return out

    @_jit
    def _vp_forward_step_nb(x, beta, dt, z):
        out = np.empty_like(x)
        c = math.sqrt(beta * dt)
        for i in range(x.size):
            out[i] = x[i] - 0.5 * beta * x[i] * dt + c * z[i]
        return out

    @_jit
    def _vp_reverse_step_nb(x, score, beta, dt, z):
        out = np.empty_like(x)
        c = math.sqrt(beta * dt)
        for i in range(x.size):
            out[i] = x[i] + (0.5 * beta * x[i] + beta * score[i]) * dt + c * z[i]
        return out

    @_jit
    def _trapezoid_nb(y, dx):
        s = 0.0
        for i in range(y.size):
            s += y[i]
        return dx * (s - 0.5 * (y[0] + y[y.size - 1]))

    @_jit
    def _row_entropy_nb(p):
        n, c = p.shape
        out = np.zeros(n)
        for i in range(n):
            s = 0.0
            for j in range(c):
                v = p[i, j]
                if v > 0.0:
                    s -= v * math.log(v)
            out[i] = s
        return out

    @_jit
    def _row_kl_nb(p, q):
        n, c = p.shape
        out = np.zeros(n)
        for i in range(n):
            s = 0.0
            for j in range(c):
                v = p[i, j]
                if v > 0.0:
                    s += v * (math.log(v) - math.log(q[i, j]))
            out[i] = s
        return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def _flat(a):
    return np.ascontiguousarray(a, dtype=np.float64).reshape(-1)


def sgld_update(theta, grad, alpha, eps, *, use_numba=None):
    """theta - alpha * grad + sqrt(2 alpha) * eps."""
    theta = np.asarray(theta, dtype=np.float64)
    if _pick(use_numba):
        return _sgld_update_nb(_flat(theta), _flat(grad), float(alpha), _flat(eps)).reshape(theta.shape)
    return _sgld_update_np(theta, np.asarray(grad), float(alpha), np.asarray(eps))


def sghmc_update(theta, r, grad, alpha, friction, mass, eps, *, use_numba=None):
    """One Euler step of friction-damped Hamiltonian dynamics; returns (theta, r)."""
    theta = np.asarray(theta, dtype=np.float64)
    if _pick(use_numba):
        th, rn = _sghmc_update_nb(_flat(theta), _flat(r), _flat(grad), float(alpha),
                                  float(friction), float(mass), _flat(eps))
        return th.reshape(theta.shape), rn.reshape(theta.shape)
    return _sghmc_update_np(theta, np.asarray(r), np.asarray(grad), float(alpha),
                            float(friction), float(mass), np.asarray(eps))


def langevin_update(x, drift, alpha, eps, lo=-np.inf, hi=np.inf, *, use_numba=None):
    """x + alpha * drift + sqrt(2 alpha) * eps, clamped to [lo, hi]."""
    x = np.asarray(x, dtype=np.float64)
    if _pick(use_numba):
        return _langevin_update_nb(_flat(x), _flat(drift), float(alpha), _flat(eps),
                                   float(lo), float(hi)).reshape(x.shape)
    return _langevin_update_np(x, np.asarray(drift), float(alpha), np.asarray(eps), float(lo), float(hi))


def vp_forward_step(x, beta, dt, z, *, use_numba=None):
    x = np.asarray(x, dtype=np.float64)
    if _pick(use_numba):
        return _vp_forward_step_nb(_flat(x), float(beta), float(dt), _flat(z)).reshape(x.shape)
    return _vp_forward_step_np(x, float(beta), float(dt), np.asarray(z))


def vp_reverse_step(x, score, beta, dt, z, *, use_numba=None):
    x = np.asarray(x, dtype=np.float64)
    if _pick(use_numba):
        return _vp_reverse_step_nb(_flat(x), _flat(score), float(beta), float(dt), _flat(z)).reshape(x.shape)
    return _vp_reverse_step_np(x, np.asarray(score), float(beta), float(dt), np.asarray(z))


def trapezoid(y, dx, *, use_numba=None) -> float:
    """Composite trapezoid rule on a uniform 1-D grid."""
    y = _flat(y)
    if _pick(use_numba):
        return float(_trapezoid_nb(y, float(dx)))
    return float(_trapezoid_np(y, float(dx)))


def row_entropy(p, *, use_numba=None):
    """Shannon entropy (nats) of each row, with 0 log 0 = 0."""
    p = np.ascontiguousarray(p, dtype=np.float64)
    if _pick(use_numba):
        return _row_entropy_nb(p)
    return _row_entropy_np(p)


def row_kl(p, q, *, use_numba=None):
    """KL(p_i || q_i) for each row pair."""
    p = np.ascontiguousarray(p, dtype=np.float64)
    q = np.ascontiguousarray(np.broadcast_to(q, p.shape), dtype=np.float64)
    if _pick(use_numba):
        return _row_kl_nb(p, q)
    return _row_kl_np(p, q)


def _pick(use_numba) -> bool:
    if use_numba is None:
        return NUMBA_ENABLED
    if use_numba and numba is None:
        raise RuntimeError("numba backend requested but numba is not importable")
    return bool(use_numba)
