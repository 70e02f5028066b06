"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one row per kernel with the best-of-N time for each backend and the
speed-up. Both backends are checked for agreement before timing.
"""
import argparse
import time

import numpy as np

from sarmae import kernels


def workloads(rng):
    xy = rng.uniform(0, 512, (2000, 2))
    boxes = np.concatenate([xy, xy + rng.uniform(4, 96, (2000, 2))], axis=1)
    scores = rng.random(2000)
    feat = rng.standard_normal((64, 64, 64))
    rois = boxes[:256] / 2
    grad = rng.standard_normal((256, 64, 7, 7))
    return {
        "box_iou 2000x500": lambda k: k.box_iou(boxes, boxes[:500]),
        "nms 2000 @0.5": lambda k: k.nms(boxes, scores, 0.5),
        "roi_align fwd 256x64x7x7": lambda k: k.roi_align_forward(feat, rois, 0.25, 7, 7, 2),
        "roi_align bwd 256x64x7x7": lambda k: k.roi_align_backward(grad, rois, 0.25, 64, 64, 2),
    }


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    impls = kernels.backends()
    print(f"selected backend: {kernels.BACKEND}; available: {', '.join(impls)}")
    rng = np.random.default_rng(0)
    header = f"{'kernel':28s}" + "".join(f"{name:>12s}" for name in impls)
    if len(impls) > 1:
        header += f"{'speed-up':>10s}"
    print(header)
    for label, run in workloads(rng).items():
        outs = {name: run(k) for name, k in impls.items()}
        ref = outs["python"]
        for name, out in outs.items():
            if not np.allclose(out, ref, atol=1e-9):
                raise SystemExit(f"{label}: {name} disagrees with the numpy fallback")
        times = {name: best_of(lambda k=k: run(k), args.repeat) for name, k in impls.items()}
        row = f"{label:28s}" + "".join(f"{times[n] * 1e3:10.2f}ms" for n in impls)
        if "cython" in times:
            row += f"{times['python'] / times['cython']:9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
