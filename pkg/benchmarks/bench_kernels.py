"""Compare the compiled and numpy raster kernels on nuScenes-sized inputs.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--points N]
"""

import argparse
import math
import timeit

import numpy as np

from rvmde import kernels
from rvmde.radar_input import MerSpec

H, W = 900, 1600


def make_inputs(n_points, seed=0):
    rng = np.random.default_rng(seed)
    cols = rng.integers(-20, W + 20, n_points)
    rows = rng.integers(-20, H + 20, n_points)
    depth = rng.uniform(1.0, 80.0, n_points)
    row_lo = rows - rng.integers(0, 120, n_points)
    spec = MerSpec()
    qmax = np.array([-2.0 * math.log(t) for t in spec.thresholds])
    mer = (1.0 / spec.sigma_u**2, 1.0 / spec.sigma_v**2, qmax,
           int(spec.sigma_u * math.sqrt(qmax[-1])), int(spec.sigma_v * math.sqrt(qmax[-1])))
    return {
        "rasterize_min (lidar)": ("rasterize_min", (rng.integers(0, W, n_points), rng.integers(0, H, n_points),
                                                    depth, H, W)),
        "fill_columns (height)": ("fill_columns", (cols[:200], row_lo[:200], rows[:200], depth[:200], H, W)),
        "splat_mer (radar)": ("splat_mer", (cols[:200], rows[:200], depth[:200], H, W, *mer)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--points", type=int, default=30_000, help="lidar points for rasterize_min")
    args = ap.parse_args(argv)
    cases = make_inputs(args.points)
    names = sorted(kernels.BACKENDS)
    print(f"backends available: {names} (default {kernels.BACKEND})")
    print(f"{'kernel':<24}" + "".join(f"{n + ' ms':>14}" for n in names) + f"{'speedup':>10}")
    for label, (fn, fargs) in cases.items():
        times = {}
        ref = None
        for name in names:
            f = getattr(kernels.get_backend(name), fn)
            res = f(*fargs)
            res = res[0] if isinstance(res, tuple) else res
            if ref is None:
                ref = res
            elif not np.array_equal(ref, res):
                raise SystemExit(f"{label}: backends disagree")
            times[name] = min(timeit.repeat(lambda: f(*fargs), number=1, repeat=args.repeat)) * 1e3
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{label:<24}" + "".join(f"{times[n]:>14.2f}" for n in names) + f"{speed:>9.1f}x")


if __name__ == "__main__":
    main()
