"""Objective metrics, paired significance tests and evaluation reports."""
import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .tfsignal import as_samples, read_wav

SI_SDR_CAP_DB = 100.0
SSNR_CLAMP_DB = (-10.0, 35.0)
METRIC_NAMES = ("pesq", "ssnr_db", "si_sdr_db", "stoi", "mos")


class MetricError(ValueError):
    pass


def si_sdr(est, ref):
    est, ref = as_samples(est), as_samples(ref)
    if est.shape != ref.shape:
        raise MetricError(f"length mismatch {est.size} vs {ref.size}")
    ref_energy = np.dot(ref, ref)
    if ref_energy <= 0:
        raise MetricError("silent reference")
    scale = np.dot(est, ref) / ref_energy
    target = scale * ref
    resid = est - target
    t_energy = np.dot(target, target)
    r_energy = np.dot(resid, resid)
    if r_energy < 1e-12 * t_energy:
        return SI_SDR_CAP_DB
    if t_energy == 0:
        return -SI_SDR_CAP_DB
    return float(min(10.0 * np.log10(t_energy / r_energy), SI_SDR_CAP_DB))


def ssnr(est, ref, sample_rate_hz=16000, frame_ms=32.0, hop_ms=32.0, clamp=SSNR_CLAMP_DB):
    """Segmental SNR with per-frame clamping and silent-frame exclusion."""
    est, ref = as_samples(est), as_samples(ref)
    if est.shape != ref.shape:
        raise MetricError(f"length mismatch {est.size} vs {ref.size}")
    n = int(round(frame_ms * sample_rate_hz / 1000.0))
    hop = int(round(hop_ms * sample_rate_hz / 1000.0))
    n_frames = max(1, 1 + (ref.size - n) // hop) if ref.size >= n else 1
    n = min(n, ref.size)
    idx = np.arange(n)[None, :] + hop * np.arange(n_frames)[:, None]
    r, e = ref[idx], est[idx]
    sig = np.sum(r * r, axis=1)
    err = np.sum((r - e) ** 2, axis=1)
    active = sig > 1e-8 * sig.max() if sig.max() > 0 else np.zeros(n_frames, bool)
    if not active.any():
        raise MetricError("no active frames in reference")
    with np.errstate(divide="ignore"):
        seg = 10.0 * np.log10(sig[active] / err[active])
    seg = np.clip(np.nan_to_num(seg, posinf=clamp[1], neginf=clamp[0]), *clamp)
    return float(seg.mean())


@dataclass
class TTestResult:
    t: float
    p: float
    n: int
    degenerate: bool = False


def paired_ttest(a, b):
    """Two-sided paired t-test on a - b."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricError("paired samples must be equal-length 1-D sequences")
    n = a.size
    if n < 2:
        raise MetricError("paired t-test needs at least two pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0 or not np.isfinite(sd):
        if mean == 0:
            return TTestResult(0.0, 1.0, n, True)
        return TTestResult(float(np.copysign(np.inf, mean)), 0.0, n, True)
    t = mean / (sd / np.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), n - 1)
    return TTestResult(float(t), float(p), n)


@dataclass
class MetricRow:
    utterance_id: str
    pesq: float = None
    ssnr_db: float = None
    si_sdr_db: float = None
    stoi: float = None
    mos: float = None

    def get(self, name):
        return getattr(self, name)


def aggregate(rows):
    out = {}
    for name in METRIC_NAMES:
        vals = [r.get(name) for r in rows if r.get(name) is not None]
        if vals:
            out[name] = float(np.mean(vals))
    return out


@dataclass
class EvalReport:
    rows: list
    aggregates: dict
    name: str = "model"
    reference_rows: dict = field(default_factory=dict)   # label -> list of MetricRow
    comparisons: dict = field(default_factory=dict)      # metric -> TTestResult
    missing: list = field(default_factory=list)

    def table_rows(self):
        out = [(label, aggregate(rows)) for label, rows in self.reference_rows.items()]
        out.append((self.name, self.aggregates))
        return out

    def metrics_present(self):
        return [m for m in METRIC_NAMES if any(m in agg for _, agg in self.table_rows())]

    def to_csv(self):
        cols = ["utterance_id", *METRIC_NAMES]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([r.utterance_id] + [_fmt(r.get(m)) for m in METRIC_NAMES])
        for label, agg in self.table_rows():
            w.writerow([f"mean:{label}"] + [_fmt(agg.get(m)) for m in METRIC_NAMES])
        for m, res in self.comparisons.items():
            w.writerow([f"ttest:{m}", f"t={res.t:.6g}", f"p={res.p:.6g}", f"n={res.n}",
                        "degenerate" if res.degenerate else "", ""])
        for uid in self.missing:
            w.writerow([f"missing:{uid}"] + [""] * len(METRIC_NAMES))
        return buf.getvalue()

    def render_table(self, digits=2):
        metrics = self.metrics_present()
        head = ["Model"] + [_HEADERS[m] for m in metrics]
        body = [[label] + [_fmt(agg.get(m), digits, "-") for m in metrics]
                for label, agg in self.table_rows()]
        lines = _align([head] + body)
        if self.comparisons:
            lines.append("")
            for m, res in self.comparisons.items():
                flag = " (degenerate)" if res.degenerate else ""
                lines.append(f"paired t-test {_HEADERS[m]}: t={res.t:.4g} p={res.p:.3g} n={res.n}{flag}")
        if self.missing:
            lines.append("")
            lines.append("missing pairs: " + ", ".join(self.missing))
        return "\n".join(lines) + "\n"


_HEADERS = {"pesq": "PESQ", "ssnr_db": "SSNR", "si_sdr_db": "SI-SDR", "stoi": "STOI", "mos": "MOS"}


def _fmt(v, digits=6, empty=""):
    if v is None:
        return empty
    return f"{v:.{digits}f}"


def _align(table):
    widths = [max(len(row[i]) for row in table) for i in range(len(table[0]))]
    lines = []
    for k, row in enumerate(table):
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if k == 0:
            lines.append("-" * len(lines[0]))
    return lines


def score_pair(uid, est, ref, sample_rate_hz=16000, pesq_fn=None, stoi_fn=None, mos_fn=None):
    n = min(len(as_samples(est)), len(as_samples(ref)))
    e, r = as_samples(est)[:n], as_samples(ref)[:n]
    row = MetricRow(uid, ssnr_db=ssnr(e, r, sample_rate_hz), si_sdr_db=si_sdr(e, r))
    if pesq_fn is not None:
        row.pesq = float(pesq_fn(e, r))
    if stoi_fn is not None:
        row.stoi = float(stoi_fn(e, r))
    if mos_fn is not None:
        row.mos = float(mos_fn(e))
    return row


def _wav_ids(d):
    return {os.path.splitext(f)[0] for f in os.listdir(d) if f.endswith(".wav")}


def evaluate(est_dir, ref_dir, noisy_dir=None, pesq_fn=None, stoi_fn=None, mos_fn=None,
             baseline_dir=None, name="model", baseline_name="baseline"):
    """Score every utterance in ``est_dir`` against ``ref_dir``.

    Optional noisy and baseline directories add reference rows; when a
    baseline is given each metric also gets a paired t-test model vs baseline.
    Ids not present in every supplied directory are reported as missing.
    """
    dirs = [d for d in (est_dir, ref_dir, noisy_dir, baseline_dir) if d is not None]
    all_ids = set().union(*(_wav_ids(d) for d in dirs))
    common = set.intersection(*(_wav_ids(d) for d in dirs))
    missing = sorted(all_ids - common)
    ids = sorted(common)
    if not ids:
        raise MetricError("no matching utterances to evaluate")

    def score_dir(d):
        rows = []
        for uid in ids:
            ref = read_wav(os.path.join(ref_dir, uid + ".wav"), "clean")
            est = read_wav(os.path.join(d, uid + ".wav"), "enhanced")
            rows.append(score_pair(uid, est, ref, ref.sample_rate_hz, pesq_fn, stoi_fn, mos_fn))
        return rows

    rows = score_dir(est_dir)
    report = EvalReport(rows, aggregate(rows), name=name, missing=missing)
    if noisy_dir is not None:
        report.reference_rows["Noisy"] = score_dir(noisy_dir)
    if baseline_dir is not None:
        base = score_dir(baseline_dir)
        report.reference_rows[baseline_name] = base
        for m in METRIC_NAMES:
            a = [r.get(m) for r in rows]
            b = [r.get(m) for r in base]
            if None not in a and None not in b and len(a) >= 2:
                report.comparisons[m] = paired_ttest(a, b)
    return report
