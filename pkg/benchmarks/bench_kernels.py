"""Compare the compiled and pure-numpy kernel backends.

Run:  python3 benchmarks/bench_kernels.py [--repeat N]

For every kernel the two backends are fed identical inputs; outputs must be
bit-identical, and the best-of-N wall time of each is reported.
"""
import argparse
import timeit

import numpy as np

from swinfe.kernels import available_backends


def cases(rng):
    x = rng.standard_normal((2, 32, 18, 18)).astype(np.float32)
    cols = rng.standard_normal((2, 16, 16, 32 * 9)).astype(np.float32)
    x2 = rng.standard_normal((2, 32, 17, 17)).astype(np.float32)
    cols2 = rng.standard_normal((2, 8, 8, 32 * 9)).astype(np.float32)
    xy = rng.uniform(0, 60, (600, 2))
    wh = rng.uniform(2, 20, (600, 2))
    boxes = np.concatenate([xy, xy + wh], axis=1)
    gt = boxes[:5]
    return {
        "im2col 3x3 s1 [2,32,16,16]": lambda k: k.im2col(x, 3, 3, 1, 16, 16),
        "im2col 3x3 s2 [2,32,16,16]": lambda k: k.im2col(x2, 3, 3, 2, 8, 8),
        "col2im 3x3 s1 [2,32,16,16]": lambda k: k.col2im(cols, 32, 18, 18, 3, 3, 1),
        "col2im 3x3 s2 [2,32,16,16]": lambda k: k.col2im(cols2, 32, 17, 17, 3, 3, 2),
        "iou_matrix 600x600": lambda k: k.iou_matrix(boxes, boxes),
        "iou_matrix 600x5": lambda k: k.iou_matrix(boxes, gt),
        "nms_sorted 600 @0.5": lambda k: k.nms_sorted(boxes, 0.5),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    backends = available_backends()
    names = sorted(backends)
    print("backends:", ", ".join(names))
    print(f"{'kernel':<30}" + "".join(f"{n + ' ms':>12}" for n in names)
          + (f"{'speedup':>10}{'identical':>11}" if len(names) > 1 else ""))
    for label, fn in cases(np.random.default_rng(args.seed)).items():
        outs, times = {}, {}
        for n in names:
            outs[n] = fn(backends[n])
            times[n] = min(timeit.repeat(lambda: fn(backends[n]), number=1, repeat=args.repeat))
        row = f"{label:<30}" + "".join(f"{1e3 * times[n]:>12.3f}" for n in names)
        if len(names) > 1:
            same = all(np.array_equal(outs[names[0]], outs[n]) and
                       outs[names[0]].dtype == outs[n].dtype for n in names[1:])
            row += f"{times['python'] / times['cython']:>9.1f}x{str(same):>11}"
        print(row)


if __name__ == "__main__":
    main()
