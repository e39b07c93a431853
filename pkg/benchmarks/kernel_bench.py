"""Benchmark the compiled kernels against the numpy fallback.

Usage: python benchmarks/kernel_bench.py [--quick]
"""

import argparse
import time

import numpy as np

from seal import kernels
from seal._pool_geom import bbox_to_feature_box, box_bin_weights, downsample_mask_binary


def time_call(fn, repeats=3):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def bench_roi_pool(backends, quick):
    rng = np.random.default_rng(0)
    mask_res = 256 if quick else 512
    n_masks = 200 if quick else 1000
    channels = 8
    spans = rng.integers(int(0.1 * mask_res), int(0.35 * mask_res), size=(n_masks, 2))
    x0s = rng.integers(0, mask_res - spans[:, 0])
    y0s = rng.integers(0, mask_res - spans[:, 1])
    bboxes = np.stack([x0s, y0s, x0s + spans[:, 0] - 1, y0s + spans[:, 1] - 1], axis=1)

    print(f"\nroi_pool_batch ({n_masks} masks, {channels} channels)")
    print(f"{'feature res':>12} " + "".join(f"{name:>12}" for name in backends))
    for res in (32, mask_res):
        feat = rng.standard_normal((channels, res, res))
        boxes_f = np.array([bbox_to_feature_box(b, mask_res, mask_res, res, res)
                            for b in bboxes])
        weights = np.empty((n_masks, 7, 7))
        for i, b in enumerate(bboxes):
            m = np.zeros((mask_res, mask_res), dtype=np.uint8)
            m[b[1]:b[3] + 1, b[0]:b[2] + 1] = 1
            weights[i] = box_bin_weights(downsample_mask_binary(m, res, res), boxes_f[i])
        row = f"{res:>10}^2 "
        for name in backends:
            kern = kernels.get_backend(name)
            ms = time_call(lambda: kern.roi_pool_batch(feat, boxes_f, weights))
            row += f"{ms:>10.2f}ms"
        print(row)


def bench_voxel(backends, quick):
    rng = np.random.default_rng(1)
    n = 200_000 if quick else 2_000_000
    size = 346
    xs = rng.integers(0, size, n)
    ys = rng.integers(0, size, n)
    tstar = rng.uniform(0, 2.0, n)
    ps = rng.choice([-1.0, 1.0], n)
    print(f"\nvoxel_accumulate ({n} events, 3x{size}x{size} grid)")
    for name in backends:
        kern = kernels.get_backend(name)

        def run():
            grid = np.zeros((3, size, size))
            kern.voxel_accumulate(grid, xs, ys, tstar, ps)

        print(f"{name:>12}: {time_call(run):8.2f}ms")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--quick", action="store_true")
    args = parser.parse_args()
    backends = ["numpy"]
    if kernels.BACKEND == "cython":
        backends.insert(0, "cython")
    else:
        print("compiled kernels not built; benchmarking the fallback only")
    bench_roi_pool(backends, args.quick)
    bench_voxel(backends, args.quick)


if __name__ == "__main__":
    main()
