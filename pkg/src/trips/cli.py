"""Command line interface: ``trips <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 failed check.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3

logger = logging.getLogger("trips")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _layers(value):
    n = int(value)
    if not 3 <= n <= 8:
        raise argparse.ArgumentTypeError(f"--layers must be in [3, 8], got {n}")
    return n


def _positive_int(value):
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return n


def _common(required_scene=True, required_cameras=True):
    p = _Parser(add_help=False)
    p.add_argument("--scene", required=required_scene,
                   help="point cloud (.ply) or trained checkpoint (.ckpt)")
    p.add_argument("--cameras", required=required_cameras, help="camera JSON file")
    p.add_argument("--out", help="output path")
    p.add_argument("--layers", type=_layers, default=4, help="pyramid layers, 3..8")
    p.add_argument("--features", type=_positive_int, default=4, help="descriptor channels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="thread cap (default: TRIPS_THREADS or all cores)")
    p.add_argument("--sh", choices=("on", "off"), default="on", help="spherical-harmonics shading")
    p.add_argument("--env", choices=("constant", "latlong"), default="constant", help="background model")
    return p


def build_parser():
    parser = _Parser(prog="trips", description="Trilinear point splatting renderer")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[_common(False, False)], help="generate a synthetic scene")
    p.add_argument("--kind", choices=("plane", "sphere", "hole"), default="plane")
    p.add_argument("--points", type=_positive_int, default=10_000)
    p.add_argument("--views", type=_positive_int, default=16)
    p.add_argument("--resolution", type=_positive_int, default=128)

    p = sub.add_parser("train", parents=[_common()], help="optimize a scene to its photos")
    p.add_argument("--epochs", type=int, default=600)
    p.add_argument("--warmup", type=int, default=20)
    p.add_argument("--eval-every", type=int, default=10)
    p.add_argument("--init", help="checkpoint to continue from")

    p = sub.add_parser("render", parents=[_common()], help="render one view to PNG")
    p.add_argument("--frame", type=int, default=0, help="camera index in --cameras")

    p = sub.add_parser("render-path", parents=[_common()], help="render an interpolated camera path")
    p.add_argument("--steps", type=_positive_int, default=10, help="frames per key-frame segment")

    p = sub.add_parser("benchmark", parents=[_common()], help="stage timings as CSV")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--repetitions", type=_positive_int, default=5)

    p = sub.add_parser("gradcheck", parents=[_common()], help="finite-difference gradient suite")
    p.add_argument("--size", type=_positive_int, default=32, help="longest image side used for the check")
    p.add_argument("--samples", type=_positive_int, default=40, help="coordinates per parameter entry")
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


# ---------------------------------------------------------------------------
# helpers

def _config(args):
    from .pipeline import ModelConfig

    return ModelConfig(n_layers=args.layers, n_features=args.features, use_sh=args.sh == "on",
                       env_mode=args.env)


def _load_model(args, cameras):
    """A model from a checkpoint (--scene *.ckpt) or a fresh one from a PLY."""
    from .io import load_model, read_ply
    from .pipeline import SplatModel

    path = Path(args.scene)
    if path.suffix == ".ckpt":
        model = load_model(path)
        return model
    cloud = read_ply(path, n_features=args.features, rng=np.random.default_rng(args.seed))
    return SplatModel.build(cloud, cameras, _config(args), rng=np.random.default_rng(args.seed))


def _camera_index(args, n):
    if not 0 <= args.frame < n:
        raise UsageError(f"--frame {args.frame} out of range (0..{n - 1})")
    return args.frame


def _out(args, default):
    return Path(args.out or default)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args):
    from .synth import make_synthetic_scene, write_scene

    scene = make_synthetic_scene(args.kind, args.points, args.views, args.resolution, args.seed,
                                 n_features=args.features)
    out = write_scene(_out(args, f"{args.kind}_scene"), scene)
    print(f"wrote {len(scene.cloud)} points and {len(scene.frames)} views to {out}")
    return EXIT_OK


def cmd_train(args):
    from .io import load_model, read_cameras, save_model
    from .training import TrainSchedule, train

    frames = read_cameras(args.cameras, load_images=True)
    missing = [i for i, f in enumerate(frames.frames) if f.image is None]
    if missing:
        raise ValueError(f"cameras {missing[:5]} have no image to train against")
    if args.init:
        model = load_model(args.init)
    else:
        model = _load_model(args, frames.cameras)
    schedule = TrainSchedule(epochs=args.epochs, warmup_epochs=min(args.warmup, max(args.epochs - 1, 0)),
                             seed=args.seed, eval_every=args.eval_every)
    out = _out(args, "run")
    out.mkdir(parents=True, exist_ok=True)
    record = train(model, frames, schedule)
    save_model(out / "model.ckpt", model)
    record.to_csv(out / "metrics.csv")
    last = record.last_eval()
    if last is not None:
        print(f"epoch {last['epoch']}: test PSNR {last['psnr']:.2f} dB, SSIM {last['ssim']:.4f}")
    print(f"wrote {out / 'model.ckpt'} and {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_render(args):
    from .io import read_cameras, write_image

    frames = read_cameras(args.cameras)
    i = _camera_index(args, len(frames))
    model = _load_model(args, frames.cameras)
    image = model.predict(camera=frames[i].camera)
    path = write_image(_out(args, f"render_{i:04d}.png"), image)
    print(f"wrote {path}")
    return EXIT_OK


def interpolate_path(cameras, steps):
    """Cameras along the key frames: slerp for rotation, linear camera centers."""
    from dataclasses import replace

    from .scene import quat_slerp, quat_to_rotation

    if len(cameras) == 1:
        return list(cameras)
    path = []
    for a, b in zip(cameras[:-1], cameras[1:]):
        ca, cb = a.center, b.center
        for k in range(steps):
            u = k / steps
            q = quat_slerp(a.q, b.q, u)
            c = (1 - u) * ca + u * cb
            path.append(replace(a, q=q, t=-quat_to_rotation(q) @ c))
    path.append(cameras[-1])
    return path


def cmd_render_path(args):
    from .io import read_cameras, write_image

    frames = read_cameras(args.cameras)
    model = _load_model(args, frames.cameras)
    out = _out(args, "path")
    out.mkdir(parents=True, exist_ok=True)
    path = interpolate_path(frames.cameras, args.steps)
    for k, cam in enumerate(path):
        write_image(out / f"{k:05d}.png", model.predict(camera=cam))
    print(f"wrote {len(path)} frames to {out}")
    return EXIT_OK


def cmd_benchmark(args):
    from .bench import benchmark_render, format_table
    from .io import read_cameras

    frames = read_cameras(args.cameras)
    i = _camera_index(args, len(frames))
    model = _load_model(args, frames.cameras)
    res = benchmark_render(model, frames[i].camera, repetitions=args.repetitions)
    cols = ["n_points", "n_layers", "count_alloc", "splat", "sort_blend", "ms_raster", "ms_net",
            "ms_tonemap", "total", "fragments_per_point_max", "mean_list_length", "truncation_rate"]
    text = format_table([res], cols)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import prepare_model, run_gradcheck
    from .io import read_cameras, read_ply

    frames = read_cameras(args.cameras)
    rng = np.random.default_rng(args.seed)
    cloud = read_ply(args.scene, n_features=args.features, rng=rng, dtype=np.float64)
    cams = []
    for cam in frames.cameras[:2]:
        z = min(1.0, args.size / max(cam.width, cam.height))
        cams.append(cam.scaled(z) if z < 1 else cam)
    model, target = prepare_model(cloud, cams, _config(args), rng)
    results = run_gradcheck(model, target, samples=args.samples, seed=args.seed)
    worst = 0.0
    for group, err in results.items():
        status = "ok" if err < args.tolerance else "FAIL"
        print(f"{group:16s} {err:.3e}  {status}")
        worst = max(worst, err)
    if not math.isfinite(worst) or worst >= args.tolerance:
        print(f"gradient check failed: max relative error {worst:.3e} >= {args.tolerance:g}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "render": cmd_render, "render-path": cmd_render_path,
    "benchmark": cmd_benchmark, "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    logging.basicConfig(level=os.environ.get("TRIPS_LOG", "WARNING"), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    from . import set_threads
    from .io import FormatError
    from .scene import SceneError

    try:
        set_threads(args.threads)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"trips {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, SceneError, OSError, ValueError, KeyError) as exc:
        print(f"trips {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
