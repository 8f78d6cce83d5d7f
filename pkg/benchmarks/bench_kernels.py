"""Time the numba and numpy preprocessing kernels on NTU-sized recordings.

Usage: python3 benchmarks/bench_kernels.py [--frames 300] [--files 200] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from pmr import _accel
from pmr.topology import KINECT_PARENTS


def make_recordings(n, frames, seed=0):
    rng = np.random.default_rng(seed)
    recs = []
    for _ in range(n):
        x = np.cumsum(rng.normal(0, 0.01, size=(25, frames, 3)), axis=1)
        bad = rng.random((25, frames)) < 0.02
        x[bad] += rng.normal(0, 1.0, size=(int(bad.sum()), 3))
        x[rng.random((25, frames)) < 0.005] = np.nan
        recs.append(x)
    return recs


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--frames", type=int, default=300)
    ap.add_argument("--files", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    recs = make_recordings(args.files, args.frames)
    parent = np.asarray(KINECT_PARENTS, dtype=np.int64)
    masks = [_accel.flag_outliers_numpy(r, 0.5) for r in recs]

    kernels = {
        "flag_outliers": (lambda r, m: _accel.flag_outliers_numpy(r, 0.5),
                          lambda r, m: _accel._flag_outliers_nb(r, 0.5)),
        "interpolate_masked": (_accel.interpolate_masked_numpy, _accel._interpolate_masked_nb),
        "bone_lengths": (lambda r, m: _accel.bone_lengths_numpy(r, parent),
                         lambda r, m: _accel._bone_lengths_nb(r, parent)),
    }
    print(f"{args.files} recordings x 25 joints x {args.frames} frames, best of {args.repeat}")
    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}  identical")
    for name, (np_fn, nb_fn) in kernels.items():
        nb_fn(recs[0], masks[0])  # compile outside the timed region
        same = all(np.array_equal(np_fn(r, m), nb_fn(r, m), equal_nan=True) for r, m in zip(recs, masks))
        t_np = min(timeit.repeat(lambda: [np_fn(r, m) for r, m in zip(recs, masks)], number=1, repeat=args.repeat))
        t_nb = min(timeit.repeat(lambda: [nb_fn(r, m) for r, m in zip(recs, masks)], number=1, repeat=args.repeat))
        print(f"{name:<20}{t_np * 1e3:>12.2f}{t_nb * 1e3:>12.2f}{t_np / t_nb:>9.1f}x  {same}")


if __name__ == "__main__":
    main()
