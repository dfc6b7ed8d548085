"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N] [--size N]

Each case runs under every available backend; the best of ``--repeat`` runs
is reported together with the speed-up over numpy and a check that both
backends produced identical output.
"""

import argparse
import timeit

import numpy as np

from dect_extract import _backend
from dect_extract.imaging import flatten_pairs, resample
from dect_extract.models import RepTreeParams, fit_rep_tree, grow_tree
from dect_extract.phantom import default_export_transform, default_spec, generate_slice, vendor_iodine_map


def cases(size):
    s = generate_slice(default_spec("brain", size, size))
    iod = vendor_iodine_map(s)
    X, y = flatten_pairs(s, iod)
    t = default_export_transform((size, size))
    order = np.argsort(X[:, 0], kind="stable")
    xs, ys = np.ascontiguousarray(X[order, 0]), np.ascontiguousarray(y[order])
    tree = grow_tree(X, y, RepTreeParams())
    rng = np.random.default_rng(0)
    px, py = rng.uniform(0, size - 1, 10**6), rng.uniform(0, size - 1, 10**6)

    def k():
        return _backend.kernels

    return [
        ("bilinear_affine export 1200x1024", lambda: resample(iod, t, 1200, 1024).pixels),
        ("bilinear_points 1e6", lambda: k().bilinear_points(s.low.pixels, px, py)),
        (f"best_split {xs.size} rows", lambda: np.array(k().best_split(xs, ys, 2.0, float(ys.mean())))),
        (f"route_leaves {X.shape[0]} rows", lambda: k().route_leaves(X, tree.feature, tree.threshold,
                                                                       tree.left, tree.right)),
        (f"fit_rep_tree {X.shape[0]} rows", lambda: fit_rep_tree(X, y).value),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=512, help="phantom side length")
    args = ap.parse_args(argv)

    names = _backend.available()
    print(f"backends: {', '.join(names)}")
    if len(names) == 1:
        print("compiled extension not built; only the numpy fallback is timed")
    print(f"{'case':<36}" + "".join(f"{n + ' ms':>14}" for n in names) + f"{'speed-up':>10}  identical")
    for label, fn in cases(args.size):
        times, outs = {}, {}
        for n in names:
            prev = _backend.use(n)
            try:
                outs[n] = fn()
                times[n] = min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3
            finally:
                _backend.use(prev)
        same = all(np.array_equal(outs[n], outs["numpy"]) for n in names)
        speed = times["numpy"] / times[names[0]]
        print(f"{label:<36}" + "".join(f"{times[n]:>14.2f}" for n in names) + f"{speed:>9.1f}x  {same}")


if __name__ == "__main__":
    main()
