"""Compare the compiled and numpy kernel backends on mini-VGG sized workloads.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--json]
"""
import argparse
import json
import timeit

import numpy as np

from flipequiv import kernels

WORKLOADS = {
    # name: (N, C, H, W, k, stride, pad)
    "im2col 64x1x33x33 k3": ("im2col", (64, 1, 33, 33), 3, 1, 1),
    "im2col 64x16x17x17 k3": ("im2col", (64, 16, 17, 17), 3, 1, 1),
    "col2im 64x16x17x17 k3": ("col2im", (64, 16, 17, 17), 3, 1, 1),
    "maxpool fwd 64x16x33x33 k3s2": ("pool_f", (64, 16, 33, 33), 3, 2, 1),
    "maxpool bwd 64x16x33x33 k3s2": ("pool_b", (64, 16, 33, 33), 3, 2, 1),
}


def _case(impl, kind, shape, k, stride, pad, rng):
    n, c, h, w = shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    xp = np.ascontiguousarray(rng.standard_normal((n, c, hp, wp)))
    if kind == "im2col":
        return lambda: impl.im2col(xp, k, stride, ho, wo)
    if kind == "col2im":
        cols = np.ascontiguousarray(rng.standard_normal((n * ho * wo, c * k * k)))
        return lambda: impl.col2im(cols, n, c, hp, wp, k, stride, ho, wo)
    if kind == "pool_f":
        return lambda: impl.maxpool_forward(xp, k, stride, ho, wo)
    _, arg = impl.maxpool_forward(xp, k, stride, ho, wo)
    g = np.ascontiguousarray(rng.standard_normal(arg.shape))
    return lambda: impl.maxpool_backward(g, arg, hp, wp)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    rows = []
    for name, (kind, shape, k, stride, pad) in WORKLOADS.items():
        row = {"workload": name}
        for backend, impl in kernels.BACKENDS.items():
            fn = _case(impl, kind, shape, k, stride, pad, rng)
            fn()
            row[backend] = min(timeit.repeat(fn, number=3, repeat=args.repeat)) / 3
        if "cython" in row:
            row["speedup"] = row["python"] / row["cython"]
        rows.append(row)
    if args.json:
        print(json.dumps(rows, indent=2))
        return
    print(f"{'workload':<32}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for r in rows:
        cy = r.get("cython")
        print(f"{r['workload']:<32}{r['python'] * 1e3:>10.2f}{(cy * 1e3 if cy else float('nan')):>11.2f}{r.get('speedup', float('nan')):>9.1f}")


if __name__ == "__main__":
    main()
