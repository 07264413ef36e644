"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat N]

The end-to-end ``enhance`` timing runs in two subprocesses so the
RLHFSE_NUMBA flag is honoured at import time.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from rlhfse import _accel


def _best(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def kernel_rows(repeat):
    rng = np.random.default_rng(0)
    x = rng.standard_normal(16000)
    n_frames = (x.size - 512) // 256 + 1
    frames = _accel.frame_signal_np(x, 512, 256, n_frames)
    feats = rng.standard_normal((257 * 63, 4))
    w1, b1 = rng.standard_normal((4, 16)), rng.standard_normal(16)
    w2, b2 = rng.standard_normal((16, 3)), rng.standard_normal(3)
    h, z = _accel.mlp_forward_np(feats, w1, b1, w2, b2)
    dz = rng.standard_normal(z.shape)
    cases = {
        "frame_signal": (lambda f: f(x, 512, 256, n_frames), "frame_signal"),
        "overlap_add": (lambda f: f(frames, 256, x.size), "overlap_add"),
        "mlp_forward": (lambda f: f(feats, w1, b1, w2, b2), "mlp_forward"),
        "mlp_backward": (lambda f: f(feats, h, dz, w2), "mlp_backward"),
    }
    rows = []
    for name, (call, base) in cases.items():
        f_np = getattr(_accel, base + "_np")
        f_nb = getattr(_accel, base + "_nb")
        call(f_nb)  # compile outside the timer
        t_np = _best(lambda: call(f_np), repeat, 20)
        t_nb = _best(lambda: call(f_nb), repeat, 20)
        rows.append((name, t_np, t_nb))
    return rows


_ENHANCE = """
import timeit, numpy as np
from rlhfse.policy import make_policy, enhance
from rlhfse.tfsignal import Waveform
p = make_policy(seed=1); p.params['w2'][:] = 0.05
w = Waveform(np.random.default_rng(0).standard_normal(16000) * 0.1, 16000)
enhance(p, w)
print(min(timeit.repeat(lambda: enhance(p, w), repeat={r}, number=5)) / 5)
"""


def enhance_row(repeat):
    times = []
    for flag in ("0", "1"):
        env = dict(os.environ, RLHFSE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", _ENHANCE.format(r=repeat)], env=env,
                             capture_output=True, text=True, check=True)
        times.append(float(out.stdout))
    return ("enhance (1 s audio)", times[0], times[1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return 1
    rows = kernel_rows(args.repeat) + [enhance_row(args.repeat)]
    print(f"{'kernel':<22}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, t_np, t_nb in rows:
        print(f"{name:<22}{t_np * 1e3:>10.3f}{t_nb * 1e3:>10.3f}{t_np / t_nb:>8.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
