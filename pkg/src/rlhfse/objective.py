"""Loss and objective terms for the RL fine-tuning step.

Each loss has a companion ``*_grad`` returning partial derivatives with
respect to its array or scalar inputs; the trainer chains these through
the policy.
"""
from dataclasses import dataclass, field

import numpy as np

LOG_RATIO_CLAMP = 20.0


class ObjectiveError(ValueError):
    pass


@dataclass
class HyperParams:
    alpha: float = 0.7
    beta: float = 1e-4
    lam: float = 1.0
    epsilon: float = 0.01
    sigma: float = 0.01
    learning_rate: float = 1e-6

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ObjectiveError("alpha must lie in [0, 1]")
        if self.beta < 0 or self.lam < 0:
            raise ObjectiveError("beta and lambda must be non-negative")
        if self.epsilon <= 0 or self.sigma <= 0 or self.learning_rate <= 0:
            raise ObjectiveError("epsilon, sigma and learning_rate must be positive")


@dataclass
class ObjectiveValue:
    reward: float
    kl: float
    beta: float = field(default=1e-4, repr=False)

    @property
    def j_theta(self):
        return j_theta(self.reward, self.kl, self.beta)


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ObjectiveError(f"shape mismatch {a.shape} vs {b.shape}")


def kl_gaussian_policies(mu_rl, mu_sft, sigma):
    """Per-element KL between N(mu_rl, s^2 I) and N(mu_sft, s^2 I)."""
    _check_shapes(mu_rl, mu_sft)
    if sigma <= 0:
        raise ObjectiveError("sigma must be positive")
    d = mu_rl - mu_sft
    return float(np.mean(d * d) / (2.0 * sigma * sigma))


def kl_gaussian_policies_grad(mu_rl, mu_sft, sigma):
    """d kl / d mu_rl."""
    return (mu_rl - mu_sft) / (sigma * sigma * mu_rl.size)


def j_theta(reward, kl, beta):
    if kl < 0:
        raise ObjectiveError("kl must be non-negative")
    return reward - beta * kl


def _ratio(logp_new, logp_old):
    lr = logp_new - logp_old
    inside = -LOG_RATIO_CLAMP < lr < LOG_RATIO_CLAMP
    return np.exp(np.clip(lr, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP)), inside


def ppo_clip_loss(logp_new, logp_old, j, epsilon):
    """Negated clipped surrogate with the objective in place of an advantage."""
    ratio, _ = _ratio(logp_new, logp_old)
    clipped = np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon)
    return float(-min(ratio * j, clipped * j))


def ppo_clip_loss_grad(logp_new, logp_old, j, epsilon):
    """Returns (d loss / d logp_new, d loss / d j).

    The unclipped branch wins ties; on the clipped branch the loss is flat
    in logp_new.
    """
    ratio, inside = _ratio(logp_new, logp_old)
    clipped = np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon)
    if ratio * j <= clipped * j:
        return (float(-j * ratio) if inside else 0.0), float(-ratio)
    return 0.0, float(-clipped)


def channel_losses(y_hat, y):
    _check_shapes(y_hat, y)
    d = y - y_hat
    return np.mean(d * d, axis=(0, 1))


def _channel_weights(n_channels, alpha):
    if n_channels == 1:
        return np.ones(1)
    if n_channels == 3:
        return np.array([alpha, 1.0 - alpha, 1.0 - alpha])
    raise ObjectiveError(f"unsupported channel count {n_channels}")


def mse_channel_loss(y_hat, y, alpha=0.7):
    """alpha * L_mag + (1 - alpha) * (L_real + L_imag); magnitude only for C=1."""
    w = _channel_weights(y.shape[2], alpha)
    return float(np.dot(w, channel_losses(y_hat, y)))


def mse_channel_loss_grad(y_hat, y, alpha=0.7):
    """d loss / d y_hat."""
    _check_shapes(y_hat, y)
    w = _channel_weights(y.shape[2], alpha)
    n_tf = y.shape[0] * y.shape[1]
    return 2.0 * (y_hat - y) * w / n_tf


def overall_loss(ppo_loss, mse_loss, lam):
    return ppo_loss + lam * mse_loss
