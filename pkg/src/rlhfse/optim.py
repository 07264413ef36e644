"""First-order optimizers over a policy's parameter dict."""
import numpy as np

OPTIMIZERS = ("adam", "sgd")


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, policy, grads):
        policy.apply_update(grads, self.lr)


class Adam:
    """Adam with bias correction; the per-parameter step is bounded by roughly ``lr``."""

    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, policy, grads):
        self.t += 1
        delta = {}
        for k, g in grads.items():
            m = self.m.get(k, np.zeros_like(g))
            v = self.v.get(k, np.zeros_like(g))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / (1 - self.b1 ** self.t)
            v_hat = v / (1 - self.b2 ** self.t)
            delta[k] = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        policy.apply_step(delta)


def make_optimizer(name, lr):
    if name == "adam":
        return Adam(lr)
    if name == "sgd":
        return SGD(lr)
    raise ValueError(f"unknown optimizer {name!r}; expected one of {OPTIMIZERS}")
