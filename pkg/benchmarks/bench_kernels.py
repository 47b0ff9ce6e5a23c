"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--quick]

Compilation happens in a warm-up call that is excluded from the timings.
Each row also checks that the two backends agree on the benchmark input.
"""

from __future__ import annotations

import argparse
import time
import timeit

import numpy as np

from editeval.kernels import load_backend


def random_boxes(rng, n):
    xy = rng.uniform(0, 0.8, (n, 2))
    wh = rng.uniform(0.02, 0.2, (n, 2))
    return np.hstack([xy, np.minimum(xy + wh, 1.0)])


def workloads(rng, quick):
    scale = 4 if quick else 1
    preds, gts = random_boxes(rng, 400 // scale), random_boxes(rng, 300 // scale)
    thresholds = np.round(0.5 + 0.05 * np.arange(10), 2)
    emb = rng.normal(size=(4000 // scale, 64))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    tp = rng.random(20000 // scale) < 0.4

    def match(k):
        ious = k.iou_matrix(preds, gts)
        return k.greedy_match(ious, np.ones(ious.shape, bool), np.zeros(len(gts), bool), thresholds)

    return {
        "iou_matrix 400x300": lambda k: k.iou_matrix(preds, gts),
        "greedy_match 10 thr": match,
        "interpolated_ap 20k": lambda k: k.interpolated_ap(tp, int(tp.sum()) + 10),
        "union_area 300 boxes": lambda k: k.union_area(gts),
        "similar_pairs 4000x64": lambda k: k.similar_pairs(emb, 0.3),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.allclose(np.asarray(a, dtype=float), np.asarray(b, dtype=float), atol=1e-9)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="smaller inputs")
    args = ap.parse_args()

    fast, slow = load_backend("numba"), load_backend("numpy")
    t0 = time.perf_counter()
    jobs = workloads(np.random.default_rng(0), args.quick)
    for fn in jobs.values():
        fn(fast)
    print(f"numba warm-up (compilation): {time.perf_counter() - t0:.2f}s")
    print(f"{'kernel':24} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  agree")
    for name, fn in jobs.items():
        agree = same(fn(fast), fn(slow))
        t_np = min(timeit.repeat(lambda: fn(slow), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: fn(fast), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:24} {t_np:10.2f} {t_nb:10.2f} {t_np / t_nb:8.1f}x  {agree}")


if __name__ == "__main__":
    main()
