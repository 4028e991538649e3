"""Compiled vs numpy kernels on desk-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel is timed on both backends with the same inputs and the outputs
are checked for agreement before any timing is reported.
"""
import argparse
import timeit

import numpy as np

from v2xpre import _kernels_py
from v2xpre.geometry import yaw_matrix

try:
    from v2xpre import _kernels as _compiled
except ImportError:
    _compiled = None


def raycast_case(rng):
    el = np.deg2rad(np.linspace(-25, 5, 32))
    az = np.deg2rad(np.arange(0, 360, 0.5))
    e, a = np.meshgrid(el, az, indexing="ij")
    dirs = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], -1).reshape(-1, 3)
    n = 20
    centers = np.column_stack([rng.uniform(-50, 50, (n, 2)), np.full(n, 0.8)])
    rots = np.stack([yaw_matrix(y) for y in rng.uniform(-np.pi, np.pi, n)])
    halves = np.tile([2.2, 0.95, 0.8], (n, 1))
    return (np.array([0.0, 0.0, 1.8]), dirs, centers, rots, halves, 0.0, 60.0)


def chamfer_case(rng):
    m, k, n = 512, 20, 64
    pred = rng.normal(size=(m, k, 3))
    target = rng.normal(size=(m, n, 3))
    counts = rng.integers(1, n + 1, m)
    return (pred, target, counts)


def iou_case(rng):
    def corners(n):
        c, s = rng.uniform(-20, 20, (n, 2)), rng.uniform(1, 5, (n, 2))
        yaw = rng.uniform(-np.pi, np.pi, n)
        u = np.array([[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]])
        out = np.empty((n, 4, 2))
        for i in range(n):
            R = yaw_matrix(yaw[i])[:2, :2]
            out[i] = (u * s[i]) @ R.T + c[i]
        return out
    return (corners(200), corners(100))


CASES = {"raycast": raycast_case, "chamfer_nn": chamfer_case,
         "rect_intersection_areas": iou_case}


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, atol=1e-12, equal_nan=True)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _compiled is None:
        print("compiled extension not built; only the numpy backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}{'numpy [ms]':>12}{'cython [ms]':>13}{'speedup':>9}")
    for name, make in CASES.items():
        inputs = make(rng)
        py = getattr(_kernels_py, name)
        t_py = min(timeit.repeat(lambda: py(*inputs), number=1, repeat=args.repeat)) * 1e3
        if _compiled is None:
            print(f"{name:<26}{t_py:>12.2f}{'-':>13}{'-':>9}")
            continue
        cy = getattr(_compiled, name)
        assert same(py(*inputs), cy(*inputs)), f"{name}: backends disagree"
        t_cy = min(timeit.repeat(lambda: cy(*inputs), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<26}{t_py:>12.2f}{t_cy:>13.2f}{t_py / t_cy:>8.1f}x")


if __name__ == "__main__":
    main()
