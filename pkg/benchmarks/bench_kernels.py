"""Benchmark the two conv2d backends on typical BEV workload shapes.

Run:  python benchmarks/bench_kernels.py

Times forward and backward for the shapes that dominate training at the
default desk-scale configuration, plus one paper-scale shape. The numpy
(im2col + BLAS) backend is the package default; the compiled direct-loop
extension is included for comparison when it is importable.
"""

import time

import numpy as np

from bevlift.kernels import compiled_available, numpy_backend

SHAPES = [
    # (label, cin, h, w, cout, k, stride)
    ("pyramid scale0", 12, 16, 32, 12, 3, 1),
    ("pyramid scale1", 12, 16, 32, 24, 3, 2),
    ("pyramid scale2", 24, 8, 16, 48, 3, 2),
    ("aligner 7x7 dw", 12, 32, 64, 12, 7, 1),
    ("head 1x1", 12, 32, 64, 5, 1, 1),
    ("paper-scale s0", 64, 128, 256, 64, 3, 1),
]


def bench(backend, cin, h, w, cout, k, stride, repeats=5):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((cin, h, w)).astype(np.float32)
    wt = rng.standard_normal((cout, cin, k, k)).astype(np.float32)
    pad = k // 2
    y = backend.conv2d_forward(x, wt, stride, pad)
    dy = np.ones_like(y)
    fwd = bwd = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        backend.conv2d_forward(x, wt, stride, pad)
        fwd = min(fwd, time.perf_counter() - t)
        t = time.perf_counter()
        backend.conv2d_backward(x, wt, dy, stride, pad)
        bwd = min(bwd, time.perf_counter() - t)
    return fwd, bwd


def main():
    backends = [("numpy", numpy_backend)]
    if compiled_available():
        from bevlift.kernels import _conv_ext
        backends.append(("cython", _conv_ext))
    else:
        print("compiled extension not available; benchmarking numpy only")

    header = f"{'shape':18s}" + "".join(
        f"{n + ' fwd':>14s}{n + ' bwd':>14s}" for n, _ in backends)
    print(header)
    for label, *args in SHAPES:
        row = f"{label:18s}"
        times = []
        for _, be in backends:
            fwd, bwd = bench(be, *args)
            times.append((fwd, bwd))
            row += f"{fwd * 1e3:12.2f}ms{bwd * 1e3:12.2f}ms"
        if len(times) == 2:
            row += f"   speedup {times[1][0] / times[0][0]:5.1f}x/{times[1][1] / times[0][1]:5.1f}x"
        print(row)


if __name__ == "__main__":
    main()
