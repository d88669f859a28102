"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat N]

Each kernel is swapped in place on ``lidar_sfm.kernels`` so the timings are of
the real call sites (grid building, grid lookup, normal equations, point-to-plane
residuals). Results of both backends are compared before timing.
"""
import argparse
import contextlib
import time

import numpy as np

from lidar_sfm import kernels
from lidar_sfm.geom import RigidTransform, so3_exp
from lidar_sfm.harness import generate
from lidar_sfm.validation import build_grid, consistency_ratio

NAMES = ("carve_free", "lookup_states", "accumulate_normal", "point_to_plane")


@contextlib.contextmanager
def use_backend(mod):
    saved = {n: getattr(kernels, n) for n in NAMES}
    for n in NAMES:
        setattr(kernels, n, getattr(mod, n))
    try:
        yield
    finally:
        for n, f in saved.items():
            setattr(kernels, n, f)


def timeit(fn, repeat):
    fn()  # warm-up, includes JIT compilation
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(n_lidar=20000, m_rows=200000):
    scene = generate({"n_stations": 4, "layout": "line", "lidar_points": n_lidar}, seed=0)
    cloud = scene.clouds[0]
    grid_a, grid_b = build_grid(scene.clouds[0]), build_grid(scene.clouds[1])
    T = RigidTransform(so3_exp([0.0, 0.0, 0.02]), [0.5, 0.0, 0.0])

    rng = np.random.default_rng(0)
    n_par = 600
    J = rng.normal(size=(m_rows, 1, 18))
    cols = np.stack([rng.integers(0, n_par - 18, m_rows)] * 18, axis=1) + np.arange(18)
    r = rng.normal(size=(m_rows, 1))

    R = np.stack([so3_exp(rng.normal(scale=0.1, size=3)) for _ in range(10)])
    t = rng.normal(size=(10, 3))
    src, dst = rng.integers(0, 10, m_rows), rng.integers(0, 10, m_rows)
    p, y = rng.normal(size=(m_rows, 3)), rng.normal(size=(m_rows, 3))
    nrm = rng.normal(size=(m_rows, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    Re, te = so3_exp([0.0, 0.0, 0.07]), np.array([0.15, -0.2, 0.05])

    def normal_eq():
        H, g = np.zeros((n_par, n_par)), np.zeros(n_par)
        kernels.accumulate_normal(H, g, J, cols, r)
        return H

    return {
        f"build_grid ({len(cloud)} rays)": lambda: build_grid(cloud, carve_margin=0.6).states,
        "consistency_ratio (grid lookup)": lambda: consistency_ratio(grid_a, grid_b, T),
        f"accumulate_normal ({m_rows} rows)": normal_eq,
        f"point_to_plane ({m_rows} residuals)": lambda: kernels.point_to_plane(
            R, t, src, dst, Re, te, p, y, nrm, True)[1],
    }


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if kernels.numba_backend is None:
        raise SystemExit("numba backend unavailable (LIDAR_SFM_NUMBA=0?); nothing to compare")
    print(f"{'kernel':40s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, fn in cases().items():
        with use_backend(kernels.numpy_backend):
            ref = fn()
            t_np = timeit(fn, args.repeat)
        with use_backend(kernels.numba_backend):
            out = fn()
            t_nb = timeit(fn, args.repeat)
        same = np.allclose(np.asarray(ref, dtype=float), np.asarray(out, dtype=float), rtol=1e-9, atol=1e-9)
        flag = "" if same else "  MISMATCH"
        print(f"{name:40s} {1e3 * t_np:10.2f} {1e3 * t_nb:10.2f} {t_np / t_nb:7.1f}x{flag}")


if __name__ == "__main__":
    main()
