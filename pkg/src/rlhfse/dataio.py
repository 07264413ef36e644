"""Paired corpora, synthetic toy data and flat key-value run configs."""
import os
from dataclasses import dataclass

import numpy as np

from .tfsignal import read_wav, write_wav

MANIFEST_NAME = "manifest.tsv"


class CorpusError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class PairedCorpus:
    root: str
    manifest: list          # (utterance_id, noisy_path, clean_path)
    sample_rate_hz: int = 16000

    @property
    def ids(self):
        return [m[0] for m in self.manifest]

    def __len__(self):
        return len(self.manifest)

    def load(self, ids=None):
        """Read pairs as ``trainer.Utterance`` objects."""
        from .trainer import Utterance

        wanted = None if ids is None else set(ids)
        out = []
        for uid, noisy, clean in self.manifest:
            if wanted is not None and uid not in wanted:
                continue
            x = read_wav(noisy, "noisy").samples
            y = read_wav(clean, "clean").samples
            n = min(x.size, y.size)
            out.append(Utterance(uid, x[:n], y[:n]))
        return out

    def split(self, val_count):
        """Deterministic train/validation split: the last ``val_count`` ids validate."""
        if not 0 < val_count < len(self):
            raise CorpusError(f"val_count {val_count} must lie in (0, {len(self)})")
        ids = self.ids
        return ids[:-val_count], ids[-val_count:]


def load_corpus(root, sample_rate_hz=16000, max_length_diff=256):
    noisy_dir, clean_dir = os.path.join(root, "noisy"), os.path.join(root, "clean")
    for d in (noisy_dir, clean_dir):
        if not os.path.isdir(d):
            raise CorpusError(f"missing directory {d}")
    noisy = {os.path.splitext(f)[0] for f in os.listdir(noisy_dir) if f.endswith(".wav")}
    clean = {os.path.splitext(f)[0] for f in os.listdir(clean_dir) if f.endswith(".wav")}
    if not noisy and not clean:
        raise CorpusError("empty corpus")
    problems = [f"orphan noisy file: {u}" for u in sorted(noisy - clean)]
    problems += [f"orphan clean file: {u}" for u in sorted(clean - noisy)]
    manifest = []
    for uid in sorted(noisy & clean):
        npath = os.path.join(noisy_dir, uid + ".wav")
        cpath = os.path.join(clean_dir, uid + ".wav")
        x, y = read_wav(npath), read_wav(cpath)
        for w, p in ((x, npath), (y, cpath)):
            if w.sample_rate_hz != sample_rate_hz:
                problems.append(f"wrong sample rate {w.sample_rate_hz} in {p}")
        if abs(len(x) - len(y)) > max_length_diff:
            problems.append(f"duration mismatch for {uid}: {len(x)} vs {len(y)} samples")
        manifest.append((uid, npath, cpath))
    if problems:
        raise CorpusError("invalid corpus:\n  " + "\n  ".join(problems))
    return PairedCorpus(root, manifest, sample_rate_hz)


def synth_clean(rng, n_samples, sample_rate_hz=16000):
    """3-5 amplitude-modulated sinusoids in 100-4000 Hz, peak 0.5."""
    t = np.arange(n_samples) / sample_rate_hz
    k = rng.integers(3, 6)
    sig = np.zeros(n_samples)
    for _ in range(k):
        f = rng.uniform(100.0, 4000.0)
        f_am = rng.uniform(2.0, 8.0)
        env = (0.5 - 0.5 * np.cos(2 * np.pi * f_am * t + rng.uniform(0, 2 * np.pi))) ** 2
        sig += rng.uniform(0.3, 1.0) * env * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    return 0.5 * sig / np.max(np.abs(sig))


def make_pair(rng, n_samples, snr_db, sample_rate_hz=16000):
    clean = synth_clean(rng, n_samples, sample_rate_hz)
    noise = rng.standard_normal(n_samples)
    noise *= np.sqrt(np.sum(clean ** 2) / (np.sum(noise ** 2) * 10 ** (snr_db / 10.0)))
    noisy = clean + noise
    peak = np.max(np.abs(noisy))
    if peak > 0.99:
        # joint rescale keeps the SNR while avoiding PCM clipping
        clean, noisy = clean * 0.99 / peak, noisy * 0.99 / peak
    return clean, noisy


def gen_toy_corpus(n_utts, duration_s, snr_db_range, seed, out_root, sample_rate_hz=16000):
    if n_utts < 1:
        raise CorpusError("n_utts must be >= 1")
    lo, hi = snr_db_range
    if hi < lo:
        raise CorpusError("snr range is reversed")
    try:
        for sub in ("noisy", "clean"):
            os.makedirs(os.path.join(out_root, sub), exist_ok=True)
    except OSError as exc:
        raise CorpusError(f"cannot write corpus to {out_root}: {exc}") from exc
    rng = np.random.default_rng(seed)
    n_samples = int(round(duration_s * sample_rate_hz))
    width = max(4, len(str(n_utts - 1)))
    lines = []
    for i in range(n_utts):
        uid = f"utt{i:0{width}d}"
        clean, noisy = make_pair(rng, n_samples, rng.uniform(lo, hi), sample_rate_hz)
        npath = os.path.join(out_root, "noisy", uid + ".wav")
        cpath = os.path.join(out_root, "clean", uid + ".wav")
        write_wav(npath, noisy, sample_rate_hz)
        write_wav(cpath, clean, sample_rate_hz)
        lines.append(f"{uid}\tnoisy/{uid}.wav\tclean/{uid}.wav")
    with open(os.path.join(out_root, MANIFEST_NAME), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return load_corpus(out_root, sample_rate_hz)


def measured_snr_db(clean, noisy):
    clean, noisy = np.asarray(clean, float), np.asarray(noisy, float)
    return float(10 * np.log10(np.sum(clean ** 2) / np.sum((noisy - clean) ** 2)))


# ---------------------------------------------------------------- run config

# key -> (type, default, description)
CONFIG_SCHEMA = {
    "sample_rate_hz": (int, 16000, "audio sample rate"),
    "window_ms": (float, 32.0, "STFT window length"),
    "hop_ms": (float, 16.0, "STFT hop"),
    "channels": (int, 1, "policy channels: 1 (magnitude) or 3 (magnitude, real, imaginary)"),
    "hidden": (int, 16, "ToyMaskNet hidden width"),
    "mask_max": (float, 2.0, "magnitude mask ceiling"),
    "alpha": (float, 0.7, "magnitude weight in the channel MSE"),
    "beta": (float, 1e-4, "KL penalty weight"),
    "lam": (float, 1.0, "MSE loss weight in the overall loss"),
    "epsilon": (float, 0.01, "PPO clip range"),
    "sigma": (float, 0.01, "std of the Gaussian mask noise"),
    "learning_rate": (float, 1e-6, "fine-tuning learning rate"),
    "optimizer": (str, "adam", "adam or sgd, used by both training stages"),
    "micro_batch": (int, 8, "utterances per micro-batch"),
    "accumulation_steps": (int, 8, "micro-batches per optimizer step"),
    "episodes": (int, 300, "fine-tuning episodes (one optimizer step each)"),
    "reward_kind": (str, "mos", "mos, pesq, comb or none (MSE only)"),
    "log_every_episodes": (int, 10, "validation interval"),
    "pretrain_epochs": (int, 30, "supervised epochs"),
    "pretrain_lr": (float, 3e-4, "supervised learning rate"),
    "pretrain_batch": (int, 16, "supervised batch size"),
    "val_count": (int, 20, "validation utterances taken from the end of the corpus"),
    "seed": (int, 0, "global seed"),
    "corpus": (str, "data/toy", "paired corpus root"),
    "out_dir": (str, "runs/toy", "output directory"),
    "sft_checkpoint": (str, "", "SFT checkpoint (default <out_dir>/sft.npz)"),
    "n_utts": (int, 200, "toy corpus size"),
    "duration_s": (float, 1.0, "toy utterance duration"),
    "snr_min_db": (float, 0.0, "toy corpus minimum SNR"),
    "snr_max_db": (float, 10.0, "toy corpus maximum SNR"),
    "mos_adapter": (str, "pseudo", "'pseudo' or an external command"),
    "pesq_adapter": (str, "pseudo", "'pseudo' or an external command"),
    "stoi_adapter": (str, "", "external command; empty disables STOI"),
}


def _coerce(key, raw):
    typ = CONFIG_SCHEMA[key][0]
    try:
        return typ(raw) if typ is not int else int(str(raw), 10)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from exc


def default_config():
    return {k: v[1] for k, v in CONFIG_SCHEMA.items()}


def parse_config(text, base=None):
    """Parse ``key = value`` lines; '#' starts a comment. Unknown keys are rejected."""
    cfg = dict(base) if base is not None else default_config()
    errors = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'key = value'")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_SCHEMA:
            errors.append(f"line {lineno}: unknown key {key!r}")
            continue
        try:
            cfg[key] = _coerce(key, value)
        except ConfigError as exc:
            errors.append(f"line {lineno}: {exc}")
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
    return cfg


def apply_overrides(cfg, pairs):
    errors = []
    cfg = dict(cfg)
    for pair in pairs:
        if "=" not in pair:
            errors.append(f"override {pair!r}: expected key=value")
            continue
        key, value = (s.strip() for s in pair.split("=", 1))
        if key not in CONFIG_SCHEMA:
            errors.append(f"override: unknown key {key!r}")
            continue
        try:
            cfg[key] = _coerce(key, value)
        except ConfigError as exc:
            errors.append(str(exc))
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
    return cfg


def serialize_config(cfg):
    return "".join(f"{k} = {cfg[k]!r}\n" if isinstance(cfg[k], float) else f"{k} = {cfg[k]}\n"
                   for k in CONFIG_SCHEMA)


def load_config(path=None, overrides=()):
    cfg = default_config()
    if path:
        with open(path) as fh:
            cfg = parse_config(fh.read(), cfg)
    return apply_overrides(cfg, overrides)
