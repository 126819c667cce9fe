"""Compare the numba kernels with the numpy fallback.

Usage::

    python3 benchmarks/bench_accel.py [--particles 200] [--steps 20000] [--repeat 3]

Times the Euler-Maruyama loop on the Ornstein-Uhlenbeck and cubic
fields and the Gaussian KDE on a 2D cloud, reports the largest
difference between the two paths, and prints a table.  The first numba call includes
compilation and is reported separately.
"""

import argparse
import time

import numpy as np

from kolmofix import kernels
from kolmofix.coeff import ExprField
from kolmofix.frozen import gaussian_cloud
from kolmofix.measure import DiscreteMeasure


def _em_case(fld, sigma, n, steps, seed=1):
    kernel = fld.compile(sigma)
    x0 = np.zeros((n, fld.dim))
    snaps = np.linspace(steps // 10, steps, 10).astype(np.int64)

    def run(backend):
        return kernels.run_em(kernel, x0, 1e-3, steps, snaps, 1e6, seed, backend=backend).points
    return run


def _kde_case(n, grid_n):
    cloud = gaussian_cloud(n, 2, seed=3)
    g = np.linspace(-1, 1, grid_n)
    grid = np.array(np.meshgrid(g, g, indexing="ij")).reshape(2, -1).T

    def run(backend):
        return kernels.kde_grid(cloud.points, cloud.weights, grid, 0.05, backend=backend)
    return run


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--particles", type=int, default=200)
    ap.add_argument("--steps", type=int, default=20_000)
    ap.add_argument("--kde-points", type=int, default=50_000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    ou = ExprField({(0, 0): "1"}, ["-x1"], m=1, dim=1)
    cubic = ExprField({(0, 0): "x1^2 * MOM(1, abs)^3"}, ["-2 * x1^3 * MOM(1, abs)"], m=0, dim=1)
    sigma = DiscreteMeasure(np.array([[-1.0], [0.5], [1.0]]))
    cases = {
        "em/ou": _em_case(ou, sigma, args.particles, args.steps),
        "em/cubic": _em_case(cubic, sigma, args.particles, args.steps),
        "kde/2d": _kde_case(args.kde_points, 41),
    }
    print(f"{'case':<10} {'compile s':>10} {'numba s':>10} {'numpy s':>10} {'speedup':>8} {'max |diff|':>11}")
    for name, run in cases.items():
        t0 = time.perf_counter()
        run("numba")
        first = time.perf_counter() - t0
        t_nb, out_nb = best_of(lambda: run("numba"), args.repeat)
        t_np, out_np = best_of(lambda: run("numpy"), max(1, args.repeat // 3))
        diff = float(np.max(np.abs(out_nb - out_np)))
        print(f"{name:<10} {first - t_nb:>10.3f} {t_nb:>10.4f} {t_np:>10.4f} "
              f"{t_np / t_nb:>8.1f} {diff:>11.2e}")


if __name__ == "__main__":
    main()
