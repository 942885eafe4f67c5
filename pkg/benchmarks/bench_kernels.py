"""Time the numba and numpy convolution kernels on the same inputs.

    python benchmarks/bench_kernels.py [--repeats 5]

Each kernel is warmed up once (numba compiles on first call), then timed as
the best of ``--repeats`` runs. Outputs of the two backends are compared so a
fast but wrong kernel shows up immediately.
"""

import argparse
import time

import numpy as np

from dcss import kernels

SHAPES = [  # (n, cin, cout, size, k, stride)
    (32, 3, 8, 12, 3, 1),
    (32, 16, 32, 12, 3, 1),
    (8, 32, 64, 16, 3, 1),
    (8, 16, 16, 17, 3, 2),
]


def best_time(fn, args, repeats):
    fn(*args)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def cases(n, cin, cout, size, k, stride, rng):
    xp = rng.normal(size=(n, cin, size + 2 * (k // 2), size + 2 * (k // 2))).astype(np.float32)
    w = rng.normal(size=(cout, cin, k, k)).astype(np.float32)
    out, _ = kernels.implementations()["numpy"]["conv_direct_forward"](xp, w, stride)
    gy = rng.normal(size=out.shape).astype(np.float32)
    cols = kernels.implementations()["numpy"]["im2col"](xp, k, k, stride)
    hp, wp = xp.shape[2:]
    return {
        "conv_direct_forward": (xp, w, stride),
        "conv_direct_backward": (xp, w, gy, stride),
        "im2col": (xp, k, k, stride),
        "col2im": (cols, n, cin, hp, wp, k, k, stride),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)
    impls = kernels.implementations()
    if "numba" not in impls:
        print("numba unavailable (or DCSS_DISABLE_NUMBA set); timing numpy only")
    rng = np.random.default_rng(0)
    print(f"{'shape (n,cin,cout,size,k,s)':<28} {'kernel':<22} " + " ".join(f"{b:>10}" for b in impls)
          + "   speedup  max|diff|")
    for shape in SHAPES:
        for name, fargs in cases(*shape, rng).items():
            times = {b: best_time(impls[b][name], fargs, args.repeats) for b in impls}
            line = f"{str(shape):<28} {name:<22} " + " ".join(f"{times[b] * 1e3:>8.2f}ms" for b in impls)
            if "numba" in impls:
                a, b = impls["numpy"][name](*fargs), impls["numba"][name](*fargs)
                a, b = (a, b) if isinstance(a, tuple) else ((a,), (b,))
                diff = max(float(np.max(np.abs(np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64))))
                           for x, y in zip(a, b))
                line += f"   {times['numpy'] / times['numba']:>6.2f}x  {diff:.1e}"
            print(line)


if __name__ == "__main__":
    main()
