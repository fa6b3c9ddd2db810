#!/usr/bin/env python3
"""Time the numba kernels against the numpy fallback.

Each path runs in its own interpreter because the backend is chosen at
import time from FAIRSOUND_DISABLE_NUMBA. The outputs of both paths are
also compared.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

WORKER = r"""
import json, sys, time
import numpy as np
from fairsound import _kernels as K

repeat = int(sys.argv[1])
rng = np.random.default_rng(0)
audio = rng.standard_normal(44100 * 10)
frames = rng.standard_normal((158, 64))
scores = np.round(rng.random(5000), 3)  # rounding forces ties
labels = rng.random(5000) < 0.3

cases = {
    "frame_rms (10 s audio)": lambda: K.frame_rms(audio, 2048, 512),
    "quantile_columns (158x64)": lambda: K.quantile_columns(frames, 0.9),
    "mann_whitney_auc (n=5000)": lambda: K.mann_whitney_auc(scores, labels),
    "roc_sweep (n=5000)": lambda: K.roc_sweep(scores, labels),
}
out = {"has_numba": K.HAS_NUMBA, "times": {}, "values": {}}
for name, fn in cases.items():
    v = fn()  # warm-up, includes jit compilation
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    out["times"][name] = (time.perf_counter() - t0) / repeat
    if isinstance(v, tuple):
        v = np.concatenate([np.asarray(a, dtype=float) for a in v])
    out["values"][name] = np.atleast_1d(np.asarray(v, dtype=float)).tolist()
print(json.dumps(out))
"""


def run(disable, repeat):
    env = dict(os.environ)
    env["FAIRSOUND_DISABLE_NUMBA"] = "1" if disable else "0"
    res = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(res.stdout)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()

    t0 = time.perf_counter()
    nb = run(False, args.repeat)
    fb = run(True, args.repeat)
    if not nb["has_numba"]:
        print("numba is not importable; both runs used the numpy path")

    print(f"{'kernel':<28} {'numba (ms)':>11} {'numpy (ms)':>11} {'speedup':>8}  match")
    for name in nb["times"]:
        a, b = nb["times"][name] * 1e3, fb["times"][name] * 1e3
        same = np.allclose(nb["values"][name], fb["values"][name], rtol=1e-12, atol=1e-12)
        print(f"{name:<28} {a:>11.4f} {b:>11.4f} {b / a:>7.1f}x  {'yes' if same else 'NO'}")
    print(f"total wall time {time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main()
