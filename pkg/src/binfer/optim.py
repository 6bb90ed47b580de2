"""First-order optimizers over flat parameter vectors (minimization)."""
from __future__ import annotations

import math
from typing import Callable

import numpy as np


class SGD:
    """theta <- theta - lr_t * grad, with lr_t from a constant or a callable schedule."""

    def __init__(self, lr: float | Callable[[int], float]):
        self.lr = lr
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        lr = self.lr(self.t) if callable(self.lr) else self.lr
        return theta - lr * grad


class Adam:
    """Adam with bias correction; one instance per parameter vector."""

    def __init__(self, lr: float | Callable[[int], float] = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if not callable(lr) and not lr > 0:
            raise ValueError("learning rate must be positive")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        lr = self.lr(self.t) if callable(self.lr) else self.lr
        return theta - lr * mhat / (np.sqrt(vhat) + self.eps)


def cosine_decay(lr0: float, total: int, floor: float = 0.05) -> Callable[[int], float]:
    """lr0 decayed along a half cosine to ``floor * lr0`` at step ``total``."""
    def lr(t):
        frac = min(t, total) / total
        return lr0 * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * frac)))
    return lr


def make_optimizer(name: str, lr):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}")


def clip_norm(g: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return g
    n = math.sqrt(float(g @ g))
    return g * (max_norm / n) if n > max_norm else g
