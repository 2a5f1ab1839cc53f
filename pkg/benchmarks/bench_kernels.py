"""Compare the numba and numpy kernel backends.

Per-kernel timings use the kernel tables directly. The end-to-end number runs
a short dc distillation in a subprocess per backend, because the backend is
fixed at import time by MMDISTILL_BACKEND.

    python benchmarks/bench_kernels.py [--repeat 20] [--iters 10]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from mmdistill import _kernels

E2E = """
import time
from mmdistill import dataio, distill
ds = dataio.generate_arrays(dataio.GenSpec(train_per_class=50, test_per_class=5))
cfg = distill.DistillConfig(iterations=2, net_width=8, batch_real=16)
distill.distill(ds, cfg)  # warm-up / jit
cfg.iterations = {iters}
t = time.perf_counter()
distill.distill(ds, cfg)
print((time.perf_counter() - t) / {iters})
"""


def cases(rng):
    x = rng.normal(size=(16, 8, 32, 32))
    w = rng.normal(size=(8, 8, 3, 3))
    y = _kernels.conv2d_np(x, w, 1, 1)
    gamma, beta = rng.normal(size=8), rng.normal(size=8)
    _, xhat, inv = _kernels.group_norm_fwd_np(x, gamma, beta, 4, 1e-5)
    a, b = rng.normal(size=(64, 128)), rng.normal(size=(4, 128))
    return {
        "conv2d": lambda k: k["conv2d"](x, w, 1, 1),
        "conv2d_grad_input": lambda k: k["conv2d_grad_input"](y, w, x.shape, 1, 1),
        "conv2d_grad_weight": lambda k: k["conv2d_grad_weight"](x, y, w.shape, 1, 1),
        "avgpool2": lambda k: k["avgpool2"](x),
        "upsample2": lambda k: k["upsample2"](x),
        "group_norm_fwd": lambda k: k["group_norm_fwd"](x, gamma, beta, 4, 1e-5),
        "group_norm_bwd": lambda k: k["group_norm_bwd"](x, xhat, inv, gamma, 4),
        "pair_sqdist_sum": lambda k: k["pair_sqdist_sum"](a, b),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--iters", type=int, default=10, help="distillation iterations for the end-to-end run")
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args()

    if not _kernels.HAS_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    backends = {name: _kernels.kernel_table(name) for name in ("numpy", "numba")}
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, fn in cases(rng).items():
        fn(backends["numba"])  # compile outside the timed region
        t = {b: min(timeit.repeat(lambda: fn(k), number=1, repeat=args.repeat)) for b, k in backends.items()}
        print(f"{name:<20} {1e3 * t['numpy']:10.3f} {1e3 * t['numba']:10.3f} {t['numpy'] / t['numba']:8.2f}")

    if args.skip_e2e:
        return
    print(f"\ndc distillation, width 8, N_B 16 ({args.iters} iterations)")
    for b in backends:
        env = dict(os.environ, MMDISTILL_BACKEND=b)
        out = subprocess.run([sys.executable, "-c", E2E.format(iters=args.iters)], env=env,
                             capture_output=True, text=True, check=True)
        print(f"  {b:<6} {1e3 * float(out.stdout.split()[-1]):8.1f} ms/iteration")


if __name__ == "__main__":
    main()
