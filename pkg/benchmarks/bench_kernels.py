"""Compare the numba loops against the numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat N]

Prints the median wall time of each kernel on representative inputs: one
LiDAR frame's worth of points for the region statistics, and a validation
batch against a region's training set for KNN.
"""

import argparse
import statistics
import time

import numpy as np

from roadsurf import kernels
from roadsurf.features import feature_dim
from roadsurf.pointcloud import RoiConfig


def timed(fn, *args, repeat=5):
    fn(*args)  # compile / warm caches
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--points", type=int, default=30_000, help="points per frame")
    ap.add_argument("--train", type=int, default=18_000, help="KNN training rows")
    ap.add_argument("--queries", type=int, default=1_000)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    cfg = RoiConfig()
    roi = (cfg.z_max, cfg.y_min, cfg.y_max, cfg.x_min, cfg.x_max, cfg.near_far_split)
    pts = np.column_stack([
        rng.uniform(0, 60, args.points), rng.uniform(-4, 4, args.points),
        rng.uniform(-0.3, 0.5, args.points), rng.uniform(0, 255, args.points),
    ])
    dim = feature_dim()
    tx = rng.normal(size=(args.train, dim))
    ty = rng.integers(0, 9, args.train)
    qx = rng.normal(size=(args.queries, dim))

    rows = [
        ("region_stats", f"{args.points} pts",
         timed(kernels.region_stats_loop, pts, *roi, repeat=args.repeat),
         timed(kernels.region_stats_numpy, pts, *roi, repeat=args.repeat)),
        ("knn_predict k=5", f"{args.queries}x{args.train}",
         timed(kernels.knn_predict_loop, tx, ty, qx, 5, 9, repeat=args.repeat),
         timed(kernels.knn_predict_numpy, tx, ty, qx, 5, 9, repeat=args.repeat)),
    ]
    print(f"{'kernel':<18}{'input':>16}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, size, t_nb, t_np in rows:
        print(f"{name:<18}{size:>16}{1e3 * t_nb:>12.3f}{1e3 * t_np:>12.3f}{t_np / t_nb:>10.2f}")


if __name__ == "__main__":
    main()
