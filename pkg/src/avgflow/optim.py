"""Adam with global-norm gradient clipping."""

from dataclasses import dataclass, field

import numpy as np


def clip_by_global_norm(grad, max_norm):
    """Scale ``grad`` so its Euclidean norm is at most ``max_norm``. Returns (grad, original norm)."""
    norm = float(np.sqrt(np.sum(np.square(grad))))
    if max_norm is not None and norm > max_norm:
        return grad * (max_norm / norm), norm
    return grad, norm


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)
    t: int = 0

    def step(self, params, grad):
        """Return updated parameters for a descent step on ``grad``."""
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
