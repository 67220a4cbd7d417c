"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--dtype float32|float64]

Also times one full training step of the mini-base network on a 64x128
scene with each backend.  Prints a table of median milliseconds per call.
"""
from __future__ import annotations

import argparse
import importlib
import os
import statistics
import sys
import time

import numpy as np


def _median_ms(fn, repeat):
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * statistics.median(times)


def kernel_cases(k, dtype, rng):
    x = rng.standard_normal((64, 128, 8)).astype(dtype)
    cols = k.im2col3x3(x)
    y, idx = k.maxpool2_forward(x)
    dy = rng.standard_normal(y.shape).astype(dtype)
    dc = rng.standard_normal((8, 16, 16, 16, 12)).astype(dtype)
    dout = rng.standard_normal((64, 128, 12)).astype(dtype)
    pts = rng.uniform(0, 100, (400, 2))
    ctr = rng.uniform(0, 100, (9, 2))
    z = rng.standard_normal((64 * 128, 12)).astype(dtype)
    lab = rng.integers(0, 12, 64 * 128).astype(np.intp)
    n = 20000
    p, g, m, v = (rng.standard_normal(n).astype(dtype) for _ in range(4))
    v = np.abs(v)
    return {
        "im2col3x3": lambda: k.im2col3x3(x),
        "col2im3x3": lambda: k.col2im3x3(cols, 64, 128, 8),
        "maxpool2_forward": lambda: k.maxpool2_forward(x),
        "maxpool2_backward": lambda: k.maxpool2_backward(dy, idx),
        "deconv_scatter(s=8)": lambda: k.deconv_scatter(dc, 8),
        "deconv_gather(s=8)": lambda: k.deconv_gather(dout, 8, 8, 16),
        "kmeans_assign": lambda: k.kmeans_assign(pts, ctr),
        "adam_update": lambda: k.adam_update(p, g, m, v, 1e-4, 0.9, 0.999, 0.1, 0.001, 1e-8),
        "softmax_xent": lambda: k.softmax_xent(z, lab),
    }


def train_step_ms(backend, dtype, repeat):
    """One loss_and_grad + Adam step with the given backend, in a fresh import."""
    os.environ["SINDISTILL_KERNELS"] = backend
    for name in [m for m in sys.modules if m.startswith("sindistill")]:
        del sys.modules[name]
    net = importlib.import_module("sindistill.net")
    spec = net.preset("mini-base")
    state = net.TrainState.fresh(net.init_params(spec, 0, dtype), 1e-3)
    rng = np.random.default_rng(0)
    img = rng.random((64, 128)).astype(dtype)
    lab = rng.integers(0, 12, (64, 128))

    def step():
        _, grads = net.loss_and_grad(state.params, spec, img, lab)
        net._adam_inplace(state, grads)

    return _median_ms(step, repeat)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    args = ap.parse_args(argv)
    dtype = np.dtype(args.dtype)

    from sindistill import _kernels_py
    try:
        from sindistill import _kernels
    except ImportError:
        print("compiled extension not built; run `pip install --no-build-isolation -e .` first")
        return 1

    py = kernel_cases(_kernels_py, dtype, np.random.default_rng(0))
    cy = kernel_cases(_kernels, dtype, np.random.default_rng(0))
    print(f"{'kernel':<22s}{'python ms':>12s}{'cython ms':>12s}{'speedup':>10s}")
    for name in py:
        a, b = _median_ms(py[name], args.repeat), _median_ms(cy[name], args.repeat)
        print(f"{name:<22s}{a:12.3f}{b:12.3f}{a / b:10.2f}")
    a = train_step_ms("python", dtype, args.repeat)
    b = train_step_ms("cython", dtype, args.repeat)
    print(f"{'train step (mini-base)':<22s}{a:12.3f}{b:12.3f}{a / b:10.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
