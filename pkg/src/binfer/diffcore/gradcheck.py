"""Central finite-difference checks against reverse-mode gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tape import value_and_grad


def numeric_grad(fn: Callable, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(fn(x))
        flat[i] = old - h
        fm = float(fn(x))
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a - b| / max(max |b|, 1e-12): inf-norm relative error."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def check_gradient(fn: Callable, x: np.ndarray, h: float = 1e-5) -> float:
    """Relative error between the tape gradient of ``fn`` at ``x`` and FD."""
    _, g = value_and_grad(fn, x)
    return relative_error(g, numeric_grad(fn, x, h))
