"""Quality estimators and relative-improvement reward signals."""
import os
import subprocess
import tempfile
import threading
from dataclasses import dataclass

import numpy as np

from .tfsignal import FrameSpec, Waveform, as_samples, stft, write_wav

MOS_RANGE = (1.0, 5.0)
PESQ_RANGE = (-0.5, 4.5)
REWARD_KINDS = ("mos", "pesq", "comb")

_PSEUDO_MOS_FRAMES = FrameSpec(16000, 32.0, 16.0)
# absolute power floor (-100 dB re full scale) so that silence maps to MOS 1
_POWER_FLOOR = 1e-10


class AdapterError(RuntimeError):
    pass


class RewardError(ValueError):
    pass


def blind_snr_db(w, sample_rate_hz=16000):
    """Minimum-statistics SNR estimate over 32 ms / 16 ms STFT cells.

    Noise power is the mean of the lowest decile of cell powers, signal power
    the mean of the rest.
    """
    x = as_samples(w)
    if x.size < int(0.2 * sample_rate_hz):
        raise RewardError("pseudo-MOS needs at least 0.2 s of audio")
    spec = _PSEUDO_MOS_FRAMES
    if sample_rate_hz != spec.sample_rate_hz:
        spec = FrameSpec(sample_rate_hz, 32.0, 16.0)
    power = np.abs(stft(x, spec).complex_spec).ravel() ** 2
    k = max(1, power.size // 10)
    part = np.partition(power, k)
    noise = part[:k].mean()
    signal = part[k:].mean()
    return 10.0 * np.log10((signal + 1e-20) / (noise + _POWER_FLOOR))


def mos_from_snr(snr_db):
    return 1.0 + 4.0 / (1.0 + np.exp(-(snr_db - 10.0) / 5.0))


def pseudo_mos_score(w):
    """Deterministic non-intrusive MOS stand-in in [1, 5]."""
    sr = w.sample_rate_hz if isinstance(w, Waveform) else 16000
    return float(mos_from_snr(blind_snr_db(w, sr)))


def pseudo_pesq(est, ref, lo_db=-10.0, hi_db=30.0):
    """Affine map of SI-SDR from [lo_db, hi_db] onto the PESQ range, clipped."""
    from .metrics import si_sdr

    v = si_sdr(est, ref)
    lo, hi = PESQ_RANGE
    return float(np.clip(lo + (hi - lo) * (v - lo_db) / (hi_db - lo_db), lo, hi))


class ExternalScorer:
    """Scores WAV files by running an external command.

    The command receives one line per item on stdin, either a path or
    ``est_path<TAB>ref_path`` for intrusive metrics, and must print one
    decimal score per line in input order. Calls are serialized.
    """

    def __init__(self, command, value_range=None, timeout=600.0):
        if isinstance(command, str):
            command = command.split()
        if not command:
            raise AdapterError("empty adapter command")
        self.command = list(command)
        self.value_range = value_range
        self.timeout = timeout
        self._lock = threading.Lock()

    def score_files(self, paths, refs=None):
        if refs is not None and len(refs) != len(paths):
            raise AdapterError("reference list length differs from input list")
        lines = [str(p) if refs is None else f"{p}\t{r}" for p, r in
                 zip(paths, refs if refs is not None else paths)]
        with self._lock:
            try:
                proc = subprocess.run(self.command, input="\n".join(lines) + "\n",
                                      capture_output=True, text=True, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise AdapterError(f"adapter {self.command[0]!r} failed: {exc}") from exc
        if proc.returncode != 0:
            raise AdapterError(f"adapter exited with {proc.returncode}: {proc.stderr.strip()}")
        out = [ln.strip() for ln in proc.stdout.splitlines() if ln.strip()]
        if len(out) != len(paths):
            raise AdapterError(f"adapter returned {len(out)} scores for {len(paths)} inputs")
        try:
            scores = np.array([float(v) for v in out])
        except ValueError as exc:
            raise AdapterError(f"malformed adapter output: {exc}") from exc
        if not np.all(np.isfinite(scores)):
            raise AdapterError("adapter returned non-finite scores")
        if self.value_range is not None:
            scores = np.clip(scores, *self.value_range)
        return [float(s) for s in scores]

    def score(self, est, ref=None):
        with tempfile.TemporaryDirectory() as tmp:
            est_path = os.path.join(tmp, "est.wav")
            write_wav(est_path, est)
            refs = None
            if ref is not None:
                ref_path = os.path.join(tmp, "ref.wav")
                write_wav(ref_path, ref)
                refs = [ref_path]
            return self.score_files([est_path], refs)[0]


def _scorer_from_config(adapter_config, value_range):
    if isinstance(adapter_config, ExternalScorer):
        return adapter_config
    if isinstance(adapter_config, dict):
        return ExternalScorer(adapter_config["command"], value_range,
                              adapter_config.get("timeout", 600.0))
    return ExternalScorer(adapter_config, value_range)


def external_mos_score(w, adapter_config):
    return _scorer_from_config(adapter_config, MOS_RANGE).score(w)


def pesq_score(est, ref, adapter_config=None):
    """Wideband PESQ via an external adapter; ``None`` or ``"pseudo"`` selects pseudo_pesq."""
    if adapter_config is None or adapter_config == "pseudo":
        return pseudo_pesq(est, ref)
    return _scorer_from_config(adapter_config, PESQ_RANGE).score(est, ref)


def make_mos_estimator(adapter_config=None):
    """Callable waveform -> MOS; ``None``/``"pseudo"`` gives pseudo_mos_score."""
    if adapter_config is None or adapter_config == "pseudo":
        return pseudo_mos_score
    scorer = _scorer_from_config(adapter_config, MOS_RANGE)
    return scorer.score


STOI_RANGE = (0.0, 1.0)


def make_intrusive_fn(adapter_config, value_range):
    """Callable (est, ref) -> score backed by an external adapter, clamped to ``value_range``."""
    return _scorer_from_config(adapter_config, value_range).score


def make_pesq_fn(adapter_config=None):
    if adapter_config is None or adapter_config == "pseudo":
        return pseudo_pesq
    scorer = _scorer_from_config(adapter_config, PESQ_RANGE)
    return scorer.score


@dataclass
class RewardSignal:
    kind: str
    value: float
    mos_part: float = 0.0
    pesq_part: float = 0.0


def relative_reward(y_rl, y_sft, y=None, kind="mos", mos_fn=pseudo_mos_score, pesq_fn=pseudo_pesq):
    """Score difference of the RL output over the SFT output."""
    if kind not in REWARD_KINDS:
        raise RewardError(f"unknown reward kind {kind!r}")
    if kind in ("pesq", "comb") and y is None:
        raise RewardError(f"reward kind {kind!r} needs a clean reference")
    r_mos = r_pesq = 0.0
    if kind in ("mos", "comb"):
        r_mos = mos_fn(y_rl) - mos_fn(y_sft)
    if kind in ("pesq", "comb"):
        r_pesq = pesq_fn(y_rl, y) - pesq_fn(y_sft, y)
    value = r_mos + r_pesq
    if not np.isfinite(value):
        raise RewardError("non-finite reward")
    return RewardSignal(kind, float(value), float(r_mos), float(r_pesq))
