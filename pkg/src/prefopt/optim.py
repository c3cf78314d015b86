"""Minimal first-order optimizers over a flat parameter vector."""

from __future__ import annotations

import numpy as np

from .errors import InvalidConfigError


class SGD:
    """Plain gradient descent."""

    def __init__(self, learning_rate: float):
        if learning_rate <= 0.0:
            raise InvalidConfigError(f"learning rate must be > 0, got {learning_rate!r}")
        self.lr = float(learning_rate)

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        params -= self.lr * grad


class Adam:
    """Adam with bias correction; state is per-instance."""

    def __init__(self, learning_rate: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if learning_rate <= 0.0:
            raise InvalidConfigError(f"learning rate must be > 0, got {learning_rate!r}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0 and eps > 0.0):
            raise InvalidConfigError("bad adam hyperparameters")
        self.lr = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self._m: np.ndarray | None = None
        self._v: np.ndarray | None = None
        self._t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        if self._m is None:
            self._m = np.zeros_like(params)
            self._v = np.zeros_like(params)
        self._t += 1
        self._m *= self.beta1
        self._m += (1.0 - self.beta1) * grad
        self._v *= self.beta2
        self._v += (1.0 - self.beta2) * grad * grad
        m_hat = self._m / (1.0 - self.beta1 ** self._t)
        v_hat = self._v / (1.0 - self.beta2 ** self._t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
