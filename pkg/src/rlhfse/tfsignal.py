"""Time-frequency transforms, channel extraction and WAV I/O."""
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

from . import _accel

WAVEFORM_LABELS = ("noisy", "clean", "enhanced")


class SignalError(ValueError):
    pass


@dataclass(frozen=True)
class FrameSpec:
    sample_rate_hz: int = 16000
    window_ms: float = 32.0
    hop_ms: float = 16.0
    window_kind: str = "hann"

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise SignalError("sample rate must be positive")
        if self.window_ms <= 0 or self.hop_ms <= 0:
            raise SignalError("window and hop must be positive")
        if self.hop_ms > self.window_ms:
            raise SignalError("hop longer than window")
        if self.window_kind != "hann":
            raise SignalError(f"unsupported window kind {self.window_kind!r}")
        if self.window_samples < 2 or self.hop_samples < 1:
            raise SignalError("window must span >= 2 samples and hop >= 1")
        env = _steady_state_envelope(self.window(), self.hop_samples)
        if env.min() < 1e-3 * env.max():
            raise SignalError(
                f"window {self.window_samples} / hop {self.hop_samples} "
                "does not satisfy the overlap-add condition")

    @property
    def window_samples(self):
        return int(round(self.window_ms * self.sample_rate_hz / 1000.0))

    @property
    def hop_samples(self):
        return int(round(self.hop_ms * self.sample_rate_hz / 1000.0))

    @property
    def n_freqs(self):
        return self.window_samples // 2 + 1

    def window(self):
        # periodic Hann
        n = self.window_samples
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)

    def to_dict(self):
        return {"sample_rate_hz": self.sample_rate_hz, "window_ms": self.window_ms,
                "hop_ms": self.hop_ms, "window_kind": self.window_kind}


def _steady_state_envelope(win, hop):
    n = len(win)
    env = np.zeros(n)
    sq = win * win
    for start in range(-(n // hop) * hop, n, hop):
        lo, hi = max(start, 0), min(start + n, n)
        if lo < hi:
            env[lo:hi] += sq[lo - start:hi - start]
    return env


# Common presets; the hop is taken as the stated "overlap".
CMGAN_FRAMES = FrameSpec(16000, 25.0, 6.25)
METRICGAN_FRAMES = FrameSpec(16000, 32.0, 16.0)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = 16000
    label: str = "noisy"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise SignalError("waveform must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.samples)):
            raise SignalError("waveform contains non-finite samples")
        if self.label not in WAVEFORM_LABELS:
            raise SignalError(f"unknown waveform label {self.label!r}")

    def __len__(self):
        return self.samples.size


def as_samples(w):
    """Accept a Waveform or a bare array and return float64 samples."""
    if isinstance(w, Waveform):
        return w.samples
    return np.asarray(w, dtype=np.float64)


@dataclass
class TFRepresentation:
    complex_spec: np.ndarray
    channels: np.ndarray
    frame_spec: FrameSpec
    original_length_samples: int
    # cached per-bin features of the input, filled lazily by the policy
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_channels(self):
        return self.channels.shape[2]

    def magnitude(self):
        return np.abs(self.complex_spec)


def _n_frames(length, spec):
    n, hop = spec.window_samples, spec.hop_samples
    padded = length + 2 * (n // 2)
    return 1 + int(np.ceil(max(padded - n, 0) / hop))


def stft(w, spec=METRICGAN_FRAMES, n_channels=1):
    """Centered STFT with a periodic Hann window.

    Frames are centered by padding half a window of zeros on the left and
    enough zeros on the right to fit the last hop. Coefficients are scaled
    by ``1/sqrt(sum(window**2))`` so white noise of variance v has mean
    bin power v.
    """
    x = as_samples(w)
    n, hop = spec.window_samples, spec.hop_samples
    if x.size < n:
        raise SignalError(f"waveform of {x.size} samples is shorter than one window ({n})")
    t = _n_frames(x.size, spec)
    total = n + (t - 1) * hop
    pad_left = n // 2
    xp = np.zeros(total)
    xp[pad_left:pad_left + x.size] = x
    win = spec.window()
    frames = _accel.frame_signal(xp, n, hop, t) * win
    spec_c = np.fft.rfft(frames, axis=1).T / np.sqrt(np.sum(win * win))
    return TFRepresentation(spec_c, extract_channels(spec_c, n_channels), spec, x.size)


def istft(tf, label="enhanced"):
    """Weighted overlap-add inverse of :func:`stft`, truncated to the original length."""
    spec = tf.frame_spec
    n, hop = spec.window_samples, spec.hop_samples
    win = spec.window()
    t = tf.complex_spec.shape[1]
    frames = np.fft.irfft(tf.complex_spec.T * np.sqrt(np.sum(win * win)), n=n, axis=1)
    total = n + (t - 1) * hop
    num = _accel.overlap_add(np.ascontiguousarray(frames * win), hop, total)
    den = _accel.overlap_add(np.tile(win * win, (t, 1)), hop, total)
    start = n // 2
    seg = slice(start, start + tf.original_length_samples)
    return Waveform(num[seg] / den[seg], spec.sample_rate_hz, label)


def extract_channels(complex_spec, n_channels):
    if n_channels == 1:
        return np.abs(complex_spec)[:, :, None]
    if n_channels == 3:
        return np.stack([np.abs(complex_spec), complex_spec.real, complex_spec.imag], axis=2)
    raise SignalError(f"unsupported channel count {n_channels}; expected 1 or 3")


def recombine_channels(channels, phase_source=None):
    """Rebuild a complex spectrogram from a channel tensor.

    Three channels are read as (magnitude, real, imaginary) and the complex
    value comes from the real and imaginary planes. A single magnitude
    channel borrows the unit phase of ``phase_source``.
    """
    c = channels.shape[2]
    if c == 3:
        return channels[:, :, 1] + 1j * channels[:, :, 2]
    if c == 1:
        if phase_source is None:
            raise SignalError("a magnitude-only channel needs a phase source")
        return channels[:, :, 0] * np.exp(1j * np.angle(phase_source))
    raise SignalError(f"unsupported channel count {c}")


def read_wav(path, label="noisy"):
    sr, data = wavfile.read(path)
    if data.ndim != 1:
        raise SignalError(f"{path}: expected mono audio")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif np.issubdtype(data.dtype, np.floating):
        samples = data.astype(np.float64)
    else:
        raise SignalError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, int(sr), label)


def to_pcm16(samples):
    return np.round(np.clip(samples, -1.0, 32767 / 32768) * 32768.0).astype(np.int16)


def write_wav(path, w, sample_rate_hz=16000):
    if isinstance(w, Waveform):
        sample_rate_hz = w.sample_rate_hz
    wavfile.write(path, sample_rate_hz, to_pcm16(as_samples(w)))
