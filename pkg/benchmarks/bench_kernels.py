"""Benchmark the normal-equation assembly kernel: compiled vs numpy backend.

The assembly sweep dominates solver runtime (everything else is O(HW)), so
this is the number that decides whether the compiled extension is worth
building on a given machine. Run:

    python3 benchmarks/bench_kernels.py [--repeats 5] [--radius 8 16]
"""

import argparse
import time

import numpy as np

from se3flow import kernels
from se3flow.dense_se3 import Neighborhood, build_normal_equations
from se3flow.fieldops import SolveParams, solve_scene
from se3flow.kernels import numpy_backend
from se3flow.se3 import Se3
from se3flow.synth import SceneSpec, generate_scene, oracle_embeddings, oracle_revisions


def available_backends():
    out = {"numpy": numpy_backend.assemble_normal_equations}
    if kernels.native is not None:
        out["native"] = kernels.native.assemble_normal_equations
    return out


def time_call(fn, repeats):
    fn()  # warmup
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_assembly(scene, radius, repeats):
    emb = oracle_embeddings(scene)
    T = Se3.identity(scene.shape)
    rev = oracle_revisions(scene, T)
    nbhd = Neighborhood(radius, 1)
    times = {}
    saved = kernels.assemble_normal_equations
    try:
        for name, fn in available_backends().items():
            kernels.assemble_normal_equations = fn
            times[name] = time_call(
                lambda: build_normal_equations(
                    T, emb, rev, scene.invdepth1, scene.intrinsics, nbhd
                ),
                repeats,
            )
    finally:
        kernels.assemble_normal_equations = saved
    return times


def bench_solve(scene, radius, repeats):
    params = SolveParams(iters=16, radius=radius)
    times = {}
    saved = kernels.assemble_normal_equations
    try:
        for name, fn in available_backends().items():
            kernels.assemble_normal_equations = fn
            times[name] = time_call(lambda: solve_scene(scene, params), max(1, repeats // 2))
    finally:
        kernels.assemble_normal_equations = saved
    return times


def report(label, times):
    ref = times.get("native", times["numpy"])
    for name in sorted(times):
        ratio = times[name] / ref
        print(f"  {label:<34} {name:<7} {1e3 * times[name]:9.1f} ms   x{ratio:.1f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--radius", type=int, nargs="+", default=[8, 16])
    ap.add_argument("--height", type=int, default=96)
    ap.add_argument("--width", type=int, default=128)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--solve", action="store_true",
                    help="also time full 16-iteration solves (slow on numpy)")
    args = ap.parse_args()

    scene = generate_scene(SceneSpec(height=args.height, width=args.width), args.seed)
    names = ", ".join(available_backends())
    print(f"scene {args.height}x{args.width}, backends: {names}")
    if kernels.native is None:
        print("note: compiled kernel not importable; numpy fallback only")

    for radius in args.radius:
        times = bench_assembly(scene, radius, args.repeats)
        report(f"assembly sweep radius {radius}", times)
    if args.solve:
        for radius in args.radius:
            times = bench_solve(scene, radius, args.repeats)
            report(f"16-iteration solve radius {radius}", times)


if __name__ == "__main__":
    main()
