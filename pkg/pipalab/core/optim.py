"""First-order optimizers over a flat parameter vector."""

import numpy as np

from pipalab.core.exceptions import InvalidInputException
from pipalab.models.models import OptimizerKind, TrainConfig


class SGD:
    """theta <- theta - lr * grad."""

    def __init__(self, lr: float):
        if lr < 0:
            raise InvalidInputException("lr must be non-negative", field="lr", value=lr)
        self.lr = lr

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.lr == 0.0:
            return params.copy()
        return params - self.lr * grad


class Adam:
    """
    Adam with bias correction.

    Moment buffers are created on the first step and sized to the parameter
    vector; a later step with a different size raises.
    """

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise InvalidInputException("lr must be non-negative", field="lr", value=lr)
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise InvalidInputException("Adam betas must lie in [0, 1)")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        if self.m.shape != params.shape:
            raise InvalidInputException("parameter vector changed size between steps")
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        if self.lr == 0.0:
            return params.copy()
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: TrainConfig, lr: float = None):
    """Optimizer named by ``cfg`` (``lr`` overrides cfg.lr)."""
    lr = cfg.lr if lr is None else lr
    if cfg.optimizer == OptimizerKind.SGD:
        return SGD(lr)
    return Adam(lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
