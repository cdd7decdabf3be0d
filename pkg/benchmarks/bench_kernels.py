"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5] [--train-step]

``--train-step`` also times one batch-32 training step end to end in two
subprocesses, one with ``RECIPNET_NUMBA=0``.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from recipnet import kernels
from recipnet.synthetic import SPEED_OF_LIGHT

STEP_SNIPPET = """
import timeit, numpy as np
from recipnet.nn import ModelConfig, init_params, loss_and_grads
p = init_params(ModelConfig(input_shape=(4, 64, 16)), 0)
x = np.random.default_rng(0).random((32, 4, 64, 16), dtype=np.float32)
y = np.full(32, 110.0)
loss_and_grads(p, x, y)
print(min(timeit.repeat(lambda: loss_and_grads(p, x, y), number=3, repeat=5)) / 3)
"""


def cases(rng):
    grid = rng.uniform(0, 50, (512, 512))
    xs, ys = rng.uniform(10, 2000, 200_000), rng.uniform(10, 2000, 200_000)
    x = rng.standard_normal((32, 16, 32, 8)).astype(np.float32)
    cols = kernels.NUMPY_KERNELS["im2col"](x, 3, 3, 1, 1)
    act = rng.standard_normal((32, 32, 64, 16)).astype(np.float32)
    pooled, arg = kernels.NUMPY_KERNELS["maxpool_fwd"](act)
    m, n = 2000, 256
    surface = np.cumsum(rng.normal(0, 1.5, (m, n)), axis=1) + 20
    dist = rng.uniform(100, 1500, m)
    za, zb = rng.uniform(20, 40, m), rng.uniform(20, 40, m)
    lam = SPEED_OF_LIGHT / (rng.uniform(449, 5850, m) * 1e6)
    return {
        "bilinear (200k points)": ("bilinear", (grid, 0.0, 0.0, 4.0, xs, ys)),
        "im2col (32x16x32x8, 3x3)": ("im2col", (x, 3, 3, 1, 1)),
        "col2im (same)": ("col2im", (cols, 32, 16, 32, 8, 3, 3, 1, 1)),
        "maxpool fwd (32x32x64x16)": ("maxpool_fwd", (act,)),
        "maxpool bwd (same)": ("maxpool_bwd", (pooled, arg, 64, 16)),
        "knife-edge loss (2000 links)": ("ep_loss", (surface, dist, za, zb, lam)),
    }


def time_call(fn, args, repeat):
    fn(*args)  # warm-up (and JIT compile)
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def train_step(numba_on):
    env = dict(os.environ, RECIPNET_NUMBA="1" if numba_on else "0")
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET], env=env, check=True,
                         capture_output=True, text=True)
    return float(out.stdout.strip())


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--train-step", action="store_true")
    args = ap.parse_args(argv)

    rows = []
    for label, (name, call_args) in cases(np.random.default_rng(0)).items():
        t_nb = time_call(kernels.NUMBA_KERNELS[name], call_args, args.repeat)
        t_np = time_call(kernels.NUMPY_KERNELS[name], call_args, args.repeat)
        rows.append((label, t_nb, t_np))
    if args.train_step:
        rows.append(("train step (batch 32, 4x64x16)", train_step(True), train_step(False)))

    print(f"{'kernel':34s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for label, a, b in rows:
        print(f"{label:34s} {a * 1e3:10.2f} {b * 1e3:10.2f} {b / a:8.1f}x")


if __name__ == "__main__":
    main()
