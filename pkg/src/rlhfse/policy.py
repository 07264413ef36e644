"""Mask-predicting policies, Gaussian mask actions and checkpoints."""
import copy
import json
from dataclasses import dataclass

import numpy as np

from . import _accel
from .tfsignal import FrameSpec, TFRepresentation, Waveform, istft, stft

ROLES = ("sft", "old", "rl")
CHECKPOINT_FORMAT = "rlhfse-policy"
CHECKPOINT_VERSION = 1
LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


class PolicyError(ValueError):
    pass


def bin_features(tf):
    """Per-bin input features: log-magnitude relative to a per-frequency
    noise floor at frames t-1, t, t+1, plus normalized frequency.

    Returns an (F*T, 4) array, row order matching ``reshape(F*T, C)``.
    """
    if "feats" in tf.cache:
        return tf.cache["feats"]
    logmag = np.log(np.abs(tf.complex_spec) + 1e-6)
    floor = np.percentile(logmag, 20, axis=1, keepdims=True)
    d = (logmag - floor) / 4.0
    prev = np.concatenate([d[:, :1], d[:, :-1]], axis=1)
    nxt = np.concatenate([d[:, 1:], d[:, -1:]], axis=1)
    n_f, n_t = d.shape
    freq = np.broadcast_to(np.linspace(0.0, 1.0, n_f)[:, None], d.shape)
    feats = np.ascontiguousarray(np.stack([prev, d, nxt, freq], axis=2).reshape(n_f * n_t, 4))
    tf.cache["feats"] = feats
    return feats


class ToyMaskNet:
    """Per-bin two-layer perceptron producing masks.

    Channel 0 is a magnitude mask ``mask_max * sigmoid(z + offset)`` in
    (0, mask_max]; channels 1 and 2 (three-channel policies only) are
    additive complex corrections ``tanh(z) * |X|``. A zero output layer
    gives the identity masks (1, 0, 0).
    """

    n_features = 4

    def __init__(self, n_channels=1, hidden=16, mask_max=2.0, seed=0, init_scale=0.5):
        if n_channels not in (1, 3):
            raise PolicyError("ToyMaskNet supports 1 or 3 channels")
        if mask_max <= 1.0:
            raise PolicyError("mask_max must exceed 1 so the identity mask is reachable")
        self.n_channels = n_channels
        self.hidden = hidden
        self.mask_max = float(mask_max)
        rng = np.random.default_rng(seed)
        self.params = {
            "w1": rng.normal(0.0, init_scale, (self.n_features, hidden)),
            "b1": np.zeros(hidden),
            "w2": np.zeros((hidden, n_channels)),
            "b2": np.zeros(n_channels),
        }

    @property
    def architecture_id(self):
        return f"toymasknet-d{self.n_features}-h{self.hidden}-c{self.n_channels}-m{self.mask_max:g}"

    @property
    def offset(self):
        # sigmoid(offset) * mask_max == 1
        return -np.log(self.mask_max - 1.0)

    def forward(self, feats, xmag):
        p = self.params
        h, z = _accel.mlp_forward(feats, p["w1"], p["b1"], p["w2"], p["b2"])
        s = 1.0 / (1.0 + np.exp(-(z[:, 0] + self.offset)))
        masks = np.empty_like(z)
        masks[:, 0] = self.mask_max * s
        dmask_dz = np.empty_like(z)
        dmask_dz[:, 0] = self.mask_max * s * (1.0 - s)
        if self.n_channels == 3:
            th = np.tanh(z[:, 1:])
            masks[:, 1:] = th * xmag[:, None]
            dmask_dz[:, 1:] = (1.0 - th * th) * xmag[:, None]
        return masks, (feats, h, dmask_dz)

    def backward(self, cache, dmasks):
        feats, h, dmask_dz = cache
        dz = np.ascontiguousarray(dmasks * dmask_dz)
        gw1, gb1, gw2, gb2 = _accel.mlp_backward(feats, h, dz, self.params["w2"])
        return {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2}


class Policy:
    """A mask predictor bound to a frame spec and a training role.

    Only ``role == "rl"`` instances accept parameter updates.
    """

    def __init__(self, net, frame_spec=None, role="rl"):
        if role not in ROLES:
            raise PolicyError(f"unknown role {role!r}")
        self.net = net
        self.frame_spec = frame_spec or FrameSpec()
        self.role = role

    @property
    def architecture_id(self):
        return self.net.architecture_id

    @property
    def n_channels(self):
        return self.net.n_channels

    @property
    def params(self):
        return self.net.params

    def forward(self, x):
        if x.n_channels != self.n_channels:
            raise PolicyError(
                f"input has {x.n_channels} channels, policy expects {self.n_channels}")
        n_f, n_t = x.complex_spec.shape
        xmag = x.channels[:, :, 0].reshape(-1)
        masks, cache = self.net.forward(bin_features(x), xmag)
        return masks.reshape(n_f, n_t, self.n_channels), cache

    def backward(self, cache, dmean):
        return self.net.backward(cache, dmean.reshape(-1, self.n_channels))

    def apply_update(self, grads, lr):
        """Gradient step ``theta -= lr * grad``."""
        self.apply_step({k: lr * g for k, g in grads.items()})

    def apply_step(self, delta):
        """``theta -= delta``; refused unless the policy is trainable."""
        if self.role != "rl":
            raise PolicyError(f"policy with role {self.role!r} is frozen")
        for k, d in delta.items():
            self.net.params[k] = self.net.params[k] - d

    def stft(self, w):
        return stft(w, self.frame_spec, self.n_channels)

    def save(self, path):
        header = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "architecture_id": self.architecture_id,
            "frame_spec": self.frame_spec.to_dict(),
            "channels": self.n_channels,
            "hidden": self.net.hidden,
            "mask_max": self.net.mask_max,
            "role": self.role,
        }
        with open(path, "wb") as fh:
            np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **self.net.params)


def load_policy(path, architecture_id=None, role=None):
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise PolicyError(f"{path}: not a policy checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise PolicyError(f"{path}: unsupported checkpoint version {header.get('version')}")
        if architecture_id is not None and header["architecture_id"] != architecture_id:
            raise PolicyError(
                f"{path}: architecture {header['architecture_id']} != expected {architecture_id}")
        net = ToyMaskNet(header["channels"], header["hidden"], header["mask_max"])
        if net.architecture_id != header["architecture_id"]:
            raise PolicyError(f"{path}: unknown architecture {header['architecture_id']}")
        for k in net.params:
            net.params[k] = np.array(data[k], dtype=np.float64)
    return Policy(net, FrameSpec(**header["frame_spec"]), role or header["role"])


def predict_mean(policy, x):
    return policy.forward(x)[0]


@dataclass
class MaskAction:
    mean_masks: np.ndarray
    sampled_masks: np.ndarray
    sigma: float
    log_prob: float


def gaussian_log_prob(a, mean, sigma):
    """Mean per-element log-density of ``a`` under N(mean, sigma^2 I)."""
    diff = a - mean
    return float(np.mean(-(diff * diff) / (2.0 * sigma * sigma)) - np.log(sigma) - LOG_SQRT_2PI)


def sample_action(mean, sigma, rng_seed=None):
    if sigma <= 0:
        raise PolicyError("sigma must be positive")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    a = mean + rng.normal(0.0, sigma, mean.shape)
    return MaskAction(mean, a, float(sigma), gaussian_log_prob(a, mean, sigma))


def deterministic_action(mean, sigma):
    return MaskAction(mean, mean.copy(), float(sigma), gaussian_log_prob(mean, mean, sigma))


def log_likelihood(policy, x, a, sigma):
    a = a.sampled_masks if isinstance(a, MaskAction) else a
    mean = predict_mean(policy, x)
    if a.shape != mean.shape:
        raise PolicyError(f"action shape {a.shape} != policy output {mean.shape}")
    return gaussian_log_prob(a, mean, sigma)


def apply_masks(masks, x):
    """Apply masks to a noisy representation.

    One channel: the magnitude is scaled and the noisy phase kept. Three
    channels: the magnitude-masked spectrogram on the noisy phase plus the
    additive real and imaginary corrections; output channels are
    (|Y|, Re Y, Im Y).
    """
    c = x.n_channels
    if masks.shape != x.channels.shape:
        raise PolicyError(f"mask shape {masks.shape} != input channels {x.channels.shape}")
    if not np.all(np.isfinite(masks)):
        raise PolicyError("masks contain non-finite values")
    base = masks[:, :, 0] * x.complex_spec
    if c == 1:
        channels = (masks[:, :, 0] * x.channels[:, :, 0])[:, :, None]
        spec = base
    else:
        real = base.real + masks[:, :, 1]
        imag = base.imag + masks[:, :, 2]
        spec = real + 1j * imag
        channels = np.stack([np.abs(spec), real, imag], axis=2)
    return TFRepresentation(spec, channels, x.frame_spec, x.original_length_samples)


def apply_masks_vjp(masks, x, enhanced, d_channels):
    """Pull a gradient w.r.t. the enhanced channels back onto the masks."""
    if x.n_channels == 1:
        return d_channels * x.channels
    real, imag = enhanced.channels[:, :, 1], enhanced.channels[:, :, 2]
    mag = enhanced.channels[:, :, 0]
    safe = np.where(mag > 0, mag, 1.0)
    d_real = d_channels[:, :, 1] + np.where(mag > 0, real / safe, 0.0) * d_channels[:, :, 0]
    d_imag = d_channels[:, :, 2] + np.where(mag > 0, imag / safe, 0.0) * d_channels[:, :, 0]
    out = np.empty_like(masks)
    out[:, :, 0] = d_real * x.complex_spec.real + d_imag * x.complex_spec.imag
    out[:, :, 1] = d_real
    out[:, :, 2] = d_imag
    return out


def synthesize(masks, x):
    return istft(apply_masks(masks, x), label="enhanced")


def enhance(policy, w, deterministic=True, sigma=0.01, rng_seed=None):
    x = policy.stft(w)
    mean = predict_mean(policy, x)
    masks = mean if deterministic else sample_action(mean, sigma, rng_seed).sampled_masks
    out = synthesize(masks, x)
    if isinstance(w, Waveform):
        out.sample_rate_hz = w.sample_rate_hz
    return out


def snapshot(policy, role="old"):
    if role not in ("old", "sft", "rl"):
        raise PolicyError(f"unknown role {role!r}")
    return Policy(copy.deepcopy(policy.net), policy.frame_spec, role)


def make_policy(n_channels=1, hidden=16, mask_max=2.0, seed=0, frame_spec=None, role="rl"):
    return Policy(ToyMaskNet(n_channels, hidden, mask_max, seed), frame_spec, role)
