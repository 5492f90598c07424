"""Command line front end: scene synthesis, training, rendering, evaluation.

Heavy imports happen inside the handlers so PARTICLE_FIELD_THREADS can cap
the BLAS thread pools before numpy first loads. Exit codes: 0 success, 2
usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from .errors import NotFoundError, ParticleFieldError


def _setup_threads() -> None:
    cap = os.environ.get("PARTICLE_FIELD_THREADS")
    if cap:
        for var in (
            "OMP_NUM_THREADS",
            "OPENBLAS_NUM_THREADS",
            "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS",
        ):
            os.environ.setdefault(var, cap)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="particlefield",
        description="Online dynamic radiance fields on physics-driven particles.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-scene", help="synthesize an analytic ground-truth sequence")
    p.add_argument("--spec", required=True, help="scene spec JSON file")
    p.add_argument("--out", required=True, help="output scene directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=_cmd_make_scene)

    p = sub.add_parser("train", help="fit a sequence online, frame by frame")
    p.add_argument("--scene", required=True, help="scene directory with frame_*/")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--particles", type=int)
    p.add_argument("--search-radius", type=float)
    p.add_argument("--steps-per-frame", type=int)
    p.add_argument("--mode", choices=("both", "features_only", "positions_only"))
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="JSON file of config overrides")
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("render", help="render one view from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--camera", required=True, help="camera JSON file")
    p.add_argument("--out", required=True, help="output PNG path")
    p.set_defaults(handler=_cmd_render)

    p = sub.add_parser("eval", help="score held-out views of one frame")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(handler=_cmd_eval)
    return parser


def _cmd_make_scene(args) -> int:
    from .synth import generate_synthetic_sequence, load_scene_spec

    spec = load_scene_spec(args.spec)
    seq = generate_synthetic_sequence(spec, args.out, args.seed)
    print(
        f"wrote {len(seq.frames)} frames "
        f"({spec.train_cameras} train / {spec.eval_cameras} eval views) to {args.out}"
    )
    return 0


def _cmd_train(args) -> int:
    from .cameras import load_sequence
    from .report import write_report
    from .training import TrainConfig, run_online_sequence

    overrides = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise NotFoundError(f"config file not found: {path}")
        overrides = json.loads(path.read_text())
    config = TrainConfig.from_dict(overrides)
    if args.particles is not None:
        config.particles = args.particles
    if args.search_radius is not None:
        config.search_radius = args.search_radius
    if args.steps_per_frame is not None:
        config.steps_per_frame = args.steps_per_frame
    if args.mode is not None:
        config.mode = args.mode
    if args.seed is not None:
        config.seed = args.seed

    sequence = load_sequence(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True)
    )
    log = run_online_sequence(sequence, config, out_dir=out)
    write_report(log, out)
    last = log.losses[-1][2] if log.losses else float("nan")
    print(f"trained {len(log.losses)} steps over {len(sequence.frames)} frames")
    print(f"final loss {last:.6f}; outputs in {out}")
    return 0


def _cmd_render(args) -> int:
    from .cameras import camera_from_dict, write_image
    from .neighbors import build_index
    from .rendering import render_view
    from .training import load_checkpoint, refresh_occupancy, render_config

    camera = camera_from_dict(json.loads(Path(args.camera).read_text()))
    state = load_checkpoint(args.checkpoint)
    index = build_index(state.cloud.positions, state.config.search_radius)
    refresh_occupancy(state, index)
    image = render_view(state.cloud, index, state.params, camera, render_config(state))
    write_image(args.out, image)
    print(f"rendered {camera.width}x{camera.height} view to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from .cameras import load_sequence
    from .report import save_view_figure
    from .training import evaluate_frame, load_checkpoint

    state = load_checkpoint(args.checkpoint)
    sequence = load_sequence(args.scene)
    if not sequence.eval_frames:
        raise NotFoundError(f"scene {args.scene} has no eval views")
    if not 0 <= args.frame < len(sequence.eval_frames):
        raise NotFoundError(
            f"frame {args.frame} out of range (0..{len(sequence.eval_frames) - 1})"
        )
    rows = evaluate_frame(state, sequence.eval_frames[args.frame])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "view", "psnr", "ssim"])
        w.writerows((args.frame, v, p, s) for v, p, s in rows)
    save_view_figure(rows, out.with_suffix(".png"))
    for view, p, s in rows:
        print(f"view {view}: psnr {p:.2f} dB, ssim {s:.4f}")
    return 0


def main(argv=None) -> int:
    _setup_threads()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        return int(code) if code is not None else 0
    try:
        return args.handler(args)
    except ParticleFieldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
