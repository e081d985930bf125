"""Times the numba hot kernels against their pure-numpy fallbacks.

Run as `python3 benchmarks/bench_kernels.py [--repeats N]`.  Numba
functions are called once before timing so JIT compilation is not
measured.  With GEODEX_NO_NUMBA=1 only the numpy column is available,
so the script exits early with a note.
"""

import argparse
import sys
import time

import numpy as np

from geodex import _kernels as K
from geodex import mesh, rng


def _timeit(fn, args, repeats, inner):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn(*args)
        best = min(best, (time.perf_counter() - t0) / inner)
    return best


def _cases():
    gen = rng.child(0, "bench")
    q1 = gen.normal(size=4)
    q1 /= np.linalg.norm(q1)
    q2 = gen.normal(size=4)
    q2 /= np.linalg.norm(q2)
    inertia = np.diag([2e-4, 3e-4, 4e-4])
    inv_inertia = np.linalg.inv(inertia)
    w = gen.normal(size=3)
    tau = 1e-3 * gen.normal(size=3)
    rot = K.quat_to_mat_np(q1)
    pts = gen.normal(size=(128, 3))

    m = mesh.normalize_scale(mesh.procedural_object(
        {"kind": "ellipsoid", "rx": 1.0, "ry": 1.3, "rz": 0.8, "subdivision": 3}))
    tri = m.vertices[m.faces]
    v0 = np.ascontiguousarray(tri[:, 0])
    e1 = np.ascontiguousarray(tri[:, 1] - tri[:, 0])
    e2 = np.ascontiguousarray(tri[:, 2] - tri[:, 0])
    areas = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
    cum = np.cumsum(areas)
    fn = np.ascontiguousarray(m.face_normals)
    uf = gen.random(128)
    ua = gen.random(128)
    ub = gen.random(128)

    return [
        ("quat_mul", (q1, q2), 2000),
        ("quat_to_mat", (q1,), 2000),
        ("physics_step", (q1, w, inertia, inv_inertia, tau, 8e-4, 0.04), 1000),
        ("rotate_points[128]", (rot, pts), 500),
        ("sample_points[128]", (cum, v0, e1, e2, fn, uf, ua, ub), 200),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5,
                    help="timing repeats; the best is reported")
    args = ap.parse_args(argv)

    if not K.NUMBA_ENABLED:
        print("GEODEX_NO_NUMBA=1: numba path disabled, nothing to compare")
        return 0

    rows = []
    for name, call_args, inner in _cases():
        base = name.split("[")[0]
        np_fn = getattr(K, f"{base}_np")
        nb_fn = getattr(K, f"{base}_numba")
        nb_fn(*call_args)  # trigger JIT before timing
        t_np = _timeit(np_fn, call_args, args.repeats, inner)
        t_nb = _timeit(nb_fn, call_args, args.repeats, inner)
        rows.append((name, t_np * 1e6, t_nb * 1e6, t_np / t_nb))

    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  {'numpy us':>10}  {'numba us':>10}  {'speedup':>8}")
    for name, t_np, t_nb, ratio in rows:
        print(f"{name:<{width}}  {t_np:>10.2f}  {t_nb:>10.2f}  {ratio:>7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
