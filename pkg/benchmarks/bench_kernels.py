"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N] [--steps N]

Prints per-kernel timings for both backends, then the wall time of a short
training run under each backend (the second run happens in a subprocess
with ``MMSADA_PURE_PYTHON=1``).
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from mmsada import _kernels_py as py

try:
    from mmsada import _kernels_c as cx
except ImportError:  # pragma: no cover - depends on the build
    cx = None


def cases(rng):
    x = rng.standard_normal((128, 128))
    xhat, _, _, inv = py.bn_forward(x, 1e-5)
    relu_out = py.relu_forward(x)
    a, b = rng.standard_normal((64, 64)), rng.standard_normal((64, 64))
    d = py.sq_dists(a, b)
    seqs = rng.standard_normal((600, 120, 12))
    idx = rng.integers(0, 600, 128)
    starts = rng.integers(0, 100, 128)
    p, g = rng.standard_normal(192 * 128), rng.standard_normal(192 * 128)
    bw = np.array([0.5, 1.0, 2.0, 4.0])

    def adam(k):
        m, v, q = np.zeros_like(p), np.zeros_like(p), p.copy()
        return lambda: k.adam_update(q, g, m, v, 1e-3, 0.9, 0.999, 0.1, 0.001, 1e-8, 1e-7)

    return {
        "softmax_rows": lambda k: (lambda: k.softmax_rows(x)),
        "bn_forward": lambda k: (lambda: k.bn_forward(x, 1e-5)),
        "bn_backward": lambda k: (lambda: k.bn_backward(x, xhat, inv)),
        "relu_forward": lambda k: (lambda: k.relu_forward(x)),
        "relu_backward": lambda k: (lambda: k.relu_backward(x, relu_out)),
        "sq_dists": lambda k: (lambda: k.sq_dists(a, b)),
        "rbf_mixture": lambda k: (lambda: k.rbf_mixture(d, bw)),
        "gather_windows": lambda k: (lambda: k.gather_windows(seqs, idx, starts, 16)),
        "adam_update": adam,
    }


def bench_kernels(repeat: int) -> None:
    rng = np.random.default_rng(0)
    print(f"{'kernel':16s} {'numpy us':>10s} {'compiled us':>12s} {'speedup':>8s}")
    for name, make in cases(rng).items():
        t_py = min(timeit.repeat(make(py), number=repeat, repeat=3)) / repeat * 1e6
        if cx is None:
            print(f"{name:16s} {t_py:10.1f} {'n/a':>12s}")
            continue
        t_c = min(timeit.repeat(make(cx), number=repeat, repeat=3)) / repeat * 1e6
        print(f"{name:16s} {t_py:10.1f} {t_c:12.1f} {t_py / t_c:7.2f}x")


TRAIN_SNIPPET = """
import time
from mmsada import kernels, synthdata as sd, trainer as tr
ds = sd.generate_domains(sd.default_domain_specs())
cfg = tr.ExperimentConfig(method="mm-sada", stage1_steps={s1}, stage2_steps={s2}, epoch_steps=10**6)
t = time.perf_counter()
tr.train(cfg, ds)
print(kernels.BACKEND, time.perf_counter() - t)
"""


def bench_training(steps: int) -> None:
    code = TRAIN_SNIPPET.format(s1=steps // 2, s2=steps - steps // 2)
    print(f"\n{steps} mm-sada training steps:")
    for pure in ("0", "1"):
        env = dict(os.environ, MMSADA_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                             text=True, check=True).stdout.split()
        print(f"  {out[0]:9s} {float(out[1]):7.2f} s  ({float(out[1]) / steps * 1e3:.1f} ms/step)")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--steps", type=int, default=200)
    args = ap.parse_args()
    bench_kernels(args.repeat)
    bench_training(args.steps)


if __name__ == "__main__":
    main()
