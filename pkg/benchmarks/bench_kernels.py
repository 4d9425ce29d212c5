"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeats 5]

Both variants are called directly, so one process measures both paths.
Numba compile time is excluded by a warm-up call.
"""
import argparse
import time

import numpy as np

from fusestrata import apcluster, kernels, stratstats
from fusestrata._jit import HAVE_NUMBA


def best_of(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def cases(rng):
    x = rng.standard_normal((4, 32, 32, 24)).astype(np.float32)
    w = rng.standard_normal((4, 4, 5, 5, 5)).astype(np.float32)
    dw = rng.standard_normal((4, 5, 5, 5)).astype(np.float32)
    b = np.zeros(4, dtype=np.float32)
    xp = np.ascontiguousarray(kernels.pad_same(x, 5))
    out = np.empty_like(x)

    pool_x = rng.standard_normal((8, 32, 32, 24))
    pads = np.array([kernels.pool_padding(n, 3, 2)[1] for n in pool_x.shape[1:]], dtype=np.int64)
    pool_shape = (8,) + tuple(kernels.pool_padding(n, 3, 2)[0] for n in pool_x.shape[1:])
    pool_out, pool_arg = np.empty(pool_shape), np.empty(pool_shape, dtype=np.int64)

    s = apcluster.similarity_matrix(rng.standard_normal((300, 8)))
    np.fill_diagonal(s, np.median(s))

    ranks = np.ascontiguousarray(np.vstack([stratstats.midranks(rng.standard_normal(200)) for _ in range(6)]))
    perms = stratstats.replicate_draws(0, 200, 2000)
    bounds = np.array([0, 70, 140, 200], dtype=np.int64)
    h_out = np.empty((6, 2000))

    def ap(step):
        def run():
            r, a = np.zeros_like(s), np.zeros_like(s)
            for _ in range(20):
                step(s, r, a, 0.7)
        return run

    return [
        ("conv3d 4->4 k5 32x32x24", lambda: kernels._conv3d_nb(xp, w, b, out),
         lambda: kernels._conv3d_np(xp, w, b, out)),
        ("depthwise k5 32x32x24", lambda: kernels._dwconv3d_nb(xp, dw, b, out),
         lambda: kernels._dwconv3d_np(xp, dw, b, out)),
        ("maxpool 3/2 8x32x32x24", lambda: kernels._maxpool3d_nb(pool_x, 3, 2, pads, pool_out, pool_arg),
         lambda: kernels._maxpool3d_np(pool_x, 3, 2, pads, pool_out, pool_arg)),
        ("AP 20 iterations n=300", ap(apcluster._ap_step_nb), ap(apcluster._ap_step_np)),
        ("KW repartition 6x2000 n=200", lambda: stratstats._repartition_h_nb(ranks, perms, bounds, h_out),
         lambda: stratstats._repartition_h_np(ranks, perms, bounds, h_out)),
    ]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rows = []
    for name, nb, np_ in cases(np.random.default_rng(0)):
        t_nb, t_np = best_of(nb, args.repeats), best_of(np_, args.repeats)
        rows.append((name, t_nb, t_np))
    print(f"{'kernel':<30}{'numba ms':>12}{'numpy ms':>12}{'numpy/numba':>14}")
    for name, t_nb, t_np in rows:
        print(f"{name:<30}{1e3 * t_nb:>12.2f}{1e3 * t_np:>12.2f}{t_np / t_nb:>14.2f}")


if __name__ == "__main__":
    main()
