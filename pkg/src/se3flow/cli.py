"""Command-line surface: generate scenes, solve them, evaluate and render.

Exit codes: 0 success, 1 usage error, 2 I/O or file-format error,
3 numerical failure. Heavy imports happen inside the command handlers so
that --threads can pin the BLAS pools before numpy first loads.
"""

import argparse
import json
import os
import sys
from pathlib import Path

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _cap_threads(n, argv, allow_reexec):
    """Pin the numeric thread pools to n workers.

    Pool sizes are read when the libraries load, so if numpy is already in
    the process the environment alone is too late; the real CLI process
    re-execs itself once with the pins exported. In-process callers (tests)
    skip the re-exec and just inherit the pins for lazily started pools.
    """
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be >= 1")
    want = str(n)
    already = all(os.environ.get(var) == want for var in _THREAD_VARS)
    for var in _THREAD_VARS:
        os.environ[var] = want
    if allow_reexec and not already and "numpy" in sys.modules:
        os.execv(sys.executable, [sys.executable, "-m", "se3flow", *argv])


def _load_spec_doc(path):
    doc = json.loads(Path(path).read_text())
    if "spec" in doc:
        return dict(doc["spec"]), doc.get("seed")
    doc = dict(doc)
    return doc, doc.pop("seed", None)


def _scene_spec(fields):
    from .synth import SceneSpec

    if "depth_range" in fields:
        fields["depth_range"] = tuple(fields["depth_range"])
    return SceneSpec(**fields)


def _solve_params(args):
    from .fieldops import SolveParams
    from .synth import OracleConfig

    return SolveParams(
        iters=args.iters,
        radius=args.radius,
        stride=args.stride,
        lam=args.lam,
        lam_abs=args.lam_abs,
        smoothing=args.smoothing == "on",
        oracle=OracleConfig(flow_noise=args.noise_flow, depth_noise=args.noise_depth),
    )


def cmd_generate(args):
    from . import fileio
    from .synth import generate_scene

    fields, seed = _load_spec_doc(args.spec)
    if args.seed is not None:
        seed = args.seed
    if seed is None:
        raise UsageError("no seed: give --seed or put one in the spec JSON")
    fileio.save_scene(generate_scene(_scene_spec(fields), seed), args.out)
    print(f"scene written to {args.out}")
    return EXIT_OK


def cmd_solve(args):
    import numpy as np

    from . import fileio
    from .fieldops import solve_scene

    scene = fileio.load_scene(args.scene)
    result = solve_scene(scene, _solve_params(args))
    if not (np.all(np.isfinite(result.field.quat)) and np.all(np.isfinite(result.field.t))):
        print("solve produced non-finite transforms", file=sys.stderr)
        return EXIT_NUMERIC
    out = Path(args.out)
    fileio.write_se3_field(out, result.field)
    diag = {
        "iterations": [
            {
                "iteration": s.iteration,
                "objective": s.objective,
                "step_max": s.step_max,
                "step_mean": s.step_mean,
                "constrained_fraction": s.constrained_fraction,
                "failed_pixels": s.failed_pixels,
            }
            for s in result.stats
        ],
    }
    diag_path = out.with_suffix(out.suffix + ".diag.json")
    diag_path.write_text(json.dumps(diag, indent=2, sort_keys=True) + "\n")
    print(f"field written to {out}, diagnostics to {diag_path}")
    return EXIT_OK


def cmd_eval(args):
    import numpy as np

    from . import fileio
    from .metrics import evaluate_field

    scene = fileio.load_scene(args.scene)
    field = fileio.read_se3_field(args.field)
    if field.shape != scene.shape:
        print(f"field is {field.shape}, scene is {scene.shape}", file=sys.stderr)
        return EXIT_IO
    if not (np.all(np.isfinite(field.quat)) and np.all(np.isfinite(field.t))):
        print("field contains non-finite transforms", file=sys.stderr)
        return EXIT_NUMERIC
    try:
        report = evaluate_field(field, scene, max_flow=args.max_flow)
    except ValueError as e:
        print(f"evaluation failed: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    text = report.to_json() if args.report == "json" else report.to_text()
    if args.out:
        Path(args.out).write_text(text)
        print(f"report written to {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_viz(args):
    from . import fileio, viz
    from .fieldops import induced_flow

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    wrote = []
    if args.flow:
        flow = fileio.read_flo(args.flow)
        fileio.write_ppm(outdir / "flow.ppm", viz.flow_to_rgb(flow, args.max_mag))
        wrote.append("flow.ppm")
    if args.field:
        field = fileio.read_se3_field(args.field)
        trans, rot = viz.twist_images(field)
        fileio.write_ppm(outdir / "twist_translation.ppm", trans)
        fileio.write_ppm(outdir / "twist_rotation.ppm", rot)
        wrote += ["twist_translation.ppm", "twist_rotation.ppm"]
        if args.scene:
            scene = fileio.load_scene(args.scene)
            if field.shape != scene.shape:
                print(f"field is {field.shape}, scene is {scene.shape}", file=sys.stderr)
                return EXIT_IO
            flow, _ = induced_flow(field, scene.invdepth1, scene.intrinsics)
            fileio.write_ppm(outdir / "flow.ppm", viz.flow_to_rgb(flow, args.max_mag))
            wrote.append("flow.ppm")
    if not wrote:
        raise UsageError("nothing to render: give --flow and/or --field")
    print(f"wrote {', '.join(sorted(set(wrote)))} to {outdir}")
    return EXIT_OK


def cmd_selftest(args):
    import numpy as np

    from . import bilap, camera, se3
    from .camera import PinholeIntrinsics
    from .fieldops import upsample_se3
    from .synth import SceneSpec, generate_scene, oracle_revisions

    failures = []

    def check(name, ok):
        print(f"  {'ok' if ok else 'FAIL'}  {name}")
        if not ok:
            failures.append(name)

    rng = np.random.default_rng(0)

    xi = rng.standard_normal((200, 6))
    xi[:, 3:] *= (np.pi - 1e-2) / np.maximum(
        np.linalg.norm(xi[:, 3:], axis=1, keepdims=True), 1.0
    )
    err = np.max(np.abs(se3.log(se3.exp(xi)) - xi))
    check(f"exp/log roundtrip ({err:.2e})", err < 1e-9)

    K = PinholeIntrinsics(100.0, 105.0, 32.0, 24.0)
    X = rng.uniform(-1, 1, (50, 3))
    X[:, 2] = rng.uniform(1.0, 4.0, 50)
    J = camera.projection_jacobian(X, K)
    eps = 1e-6
    fd = np.stack(
        [
            (
                camera.project(X + eps * np.eye(3)[i], K)
                - camera.project(X - eps * np.eye(3)[i], K)
            )
            / (2 * eps)
            for i in range(3)
        ],
        axis=-1,
    )
    jerr = np.max(np.abs(J - fd) / np.maximum(np.abs(fd), 1.0))
    check(f"projection jacobian vs finite differences ({jerr:.2e})", jerr < 1e-5)

    w = rng.uniform(0.5, 2.0, (8, 7))
    sys_ = bilap.SmoothingSystem(bilap.EdgeWeights(w[:, 1:], w[1:, :]))
    v = rng.standard_normal((8, 7, 2))
    u = sys_.solve(v)
    resid = np.abs(sys_.matrix @ u.reshape(-1, 2) - v.reshape(-1, 2)).max()
    check(f"smoothing system residual ({resid:.2e})", resid < 1e-8 * np.abs(v).max())

    scene = generate_scene(SceneSpec(height=48, width=64), 3)
    rev = oracle_revisions(scene, scene.gt_field())
    gt_resid = np.abs(rev.r[scene.meas_ok]).max()
    check(f"ground-truth field is a solver fixed point ({gt_resid:.2e})", gt_resid < 1e-8)

    T = se3.exp(0.1 * rng.standard_normal((4, 5, 6)))
    up = upsample_se3(T, 2)
    check("upsampling preserves shape and finiteness",
          up.shape == (8, 10) and bool(np.all(np.isfinite(up.quat))))

    if failures:
        print(f"{len(failures)} self-test(s) failed")
        return EXIT_NUMERIC
    print("all self-tests passed")
    return EXIT_OK


def build_parser() -> _Parser:
    p = _Parser(prog="se3flow", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP worker threads")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="sample a synthetic scene from a JSON spec")
    g.add_argument("--spec", required=True, help="SceneSpec JSON file")
    g.add_argument("--out", required=True, help="output scene directory")
    g.add_argument("--seed", type=int, default=None, help="override the spec's seed")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("solve", help="estimate a dense transform field for a scene")
    s.add_argument("--scene", required=True, help="scene directory")
    s.add_argument("--out", required=True, help="output field file (.se3f)")
    s.add_argument("--iters", type=int, default=16)
    s.add_argument("--radius", type=int, default=16)
    s.add_argument("--stride", type=int, default=1)
    s.add_argument("--lambda", dest="lam", type=float, default=1e-4,
                   help="relative diagonal damping")
    s.add_argument("--lambda-abs", dest="lam_abs", type=float, default=1e-8,
                   help="absolute diagonal damping floor")
    s.add_argument("--smoothing", choices=("on", "off"), default="off")
    s.add_argument("--noise-flow", type=float, default=0.0, help="oracle flow noise (px)")
    s.add_argument("--noise-depth", type=float, default=0.0,
                   help="oracle inverse-depth noise")
    s.set_defaults(func=cmd_solve)

    e = sub.add_parser("eval", help="score a field file against a scene's ground truth")
    e.add_argument("--scene", required=True, help="scene directory")
    e.add_argument("--field", required=True, help="field file (.se3f)")
    e.add_argument("--out", default=None, help="report path (default: stdout)")
    e.add_argument("--report", choices=("json", "text"), default="json")
    e.add_argument("--max-flow", type=float, default=None,
                   help="exclude pixels with true 2D motion at or above this many px")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("viz", help="render flow and twist images as PPM")
    v.add_argument("--flow", default=None, help=".flo file to render")
    v.add_argument("--field", default=None, help=".se3f field to render")
    v.add_argument("--scene", default=None,
                   help="scene directory (renders the field's induced flow)")
    v.add_argument("--out", required=True, help="output directory")
    v.add_argument("--max-mag", type=float, default=None,
                   help="flow magnitude mapped to full saturation")
    v.set_defaults(func=cmd_viz)

    t = sub.add_parser("selftest", help="run built-in numeric sanity checks")
    t.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    allow_reexec = argv is None
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _cap_threads(args.threads, argv, allow_reexec)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except Exception as e:  # noqa: BLE001 - format errors come from many layers
        from .fileio import FileFormatError

        if isinstance(e, FileFormatError):
            print(f"format error: {e}", file=sys.stderr)
            return EXIT_IO
        if isinstance(e, (ValueError, ArithmeticError)):
            print(f"numerical failure: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        raise


if __name__ == "__main__":
    sys.exit(main())
