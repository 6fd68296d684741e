"""Compare the compiled and numpy convolution backends on representative shapes.

    python3 benchmarks/bench_conv.py [--repeat 5]
"""

import argparse
import time

import numpy as np

from otdeconv import kernels

CASES = [
    # (label, input shape (N, C, D, H, W), kernel shape (O, C, k, k, k), stride)
    ("unet 3x3x3, 8->8, 16^3", (1, 8, 18, 18, 18), (8, 8, 3, 3, 3), 1),
    ("unet 3x3x3, 16->16, 32^3", (1, 16, 34, 34, 34), (16, 16, 3, 3, 3), 1),
    ("disc stride 2, 1->16, 32^3", (1, 1, 34, 34, 34), (16, 1, 3, 3, 3), 2),
    ("blur 9^3, 1->1, 24^3", (1, 1, 32, 32, 32), (1, 1, 9, 9, 9), 1),
]


def timeit(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    rng = np.random.default_rng(0)
    print(f"{'case':32s} " + " ".join(f"{b + ' fwd':>12s} {b + ' wgrad':>12s}" for b in backends))
    with kernels.limit_threads():
        for label, xs, ws, s in CASES:
            x = rng.standard_normal(xs)
            w = rng.standard_normal(ws)
            ref = backends["numpy"].correlate_padded(x, w, s)
            cells = []
            for name, mod in backends.items():
                out = mod.correlate_padded(x, w, s)
                assert np.allclose(out, ref, rtol=1e-10, atol=1e-10), name
                g = np.ones_like(out)
                cells.append(timeit(lambda: mod.correlate_padded(x, w, s), args.repeat))
                cells.append(timeit(lambda: mod.correlate_weight_grad(x, g, ws[2:], s), args.repeat))
            print(f"{label:32s} " + " ".join(f"{c * 1e3:10.2f}ms" for c in cells))


if __name__ == "__main__":
    main()
