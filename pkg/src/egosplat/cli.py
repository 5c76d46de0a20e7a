"""Command-line entry point: ``egosplat <subcommand> ...``.

Exit status is 0 on success, 2 for invalid input (missing files, bad
manifests, bad arguments) and 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dataset import CaptureDataset, _save_rgb, load_dataset, preprocess
from .errors import EgoSplatError, NumericalError
from .formation import FormationMode, form_image
from .geometry import CameraModel
from .metrics import ablation_table, psnr, reproj_percentiles, ssim, write_reproj_report
from .optimizer import TrainConfig, frame_plans, split_holdout, train
from .scene import GaussianScene, init_from_points
from .simulator import (
    MotionProfile,
    PoseDegradation,
    SensorProfile,
    capture,
    default_viewpoint,
    generate_scene,
    perturb_scene,
)

log = logging.getLogger("egosplat")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3

ABLATIONS = {
    "full": {},
    "w/o motion sampling": {"use_motion_sampling": False},
    "w/o VIBA": {"use_viba_trajectory": False},
    "w/o scene gamma": {"use_scene_gamma": False},
}


class CliError(EgoSplatError, ValueError):
    pass


def _path(args, p: str | None) -> Path | None:
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else Path(args.root) / p


def read_config_file(path: Path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Keys use flag spelling without dashes."""
    if not path.exists():
        raise CliError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    scene = generate_scene(args.scene, args.count, args.seed)
    scene.radiance_scale = args.radiance_scale
    motion = MotionProfile(kind=args.profile, duration=args.duration, peak_deg_s=args.peak_deg_s,
                           base_pose=default_viewpoint(args.scene), seed=args.seed)
    sensor = SensorProfile(width=args.width, height=args.height, focal=args.focal, readout=args.readout,
                           exposure_policy=args.exposure_policy, exposure=args.exposure,
                           exposure_cap=args.exposure_cap, photons_per_unit=args.photons_per_unit,
                           frame_rate=args.frame_rate, raw_model=args.raw_model,
                           vignette_corner=args.vignette_corner)
    degradation = PoseDegradation(args.rot_noise_deg, args.trans_noise_mm, args.time_offset_ms,
                                  seed=args.seed + 1)
    ds = capture(scene, motion, sensor, degradation, seed=args.seed, n_frames=args.frames)
    ds.manifest["scene"] = {"kind": args.scene, "count": args.count, "seed": args.seed,
                            "radiance_scale": args.radiance_scale}
    out = _path(args, args.out)
    ds.save(out)
    scene.save(out / "scene_gt.txt")
    perturb_scene(scene, seed=args.seed).save(out / "scene_init.txt")
    print(f"wrote {len(ds)} frames to {out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    raw = load_dataset(_path(args, args.dataset))
    w = args.width or raw.camera.width
    h = args.height or raw.camera.height
    target = CameraModel.pinhole(w, h, args.focal or w / 2.0)
    ds = preprocess(raw, target)
    out = _path(args, args.out)
    ds.save(out)
    for name in ("scene_gt.txt", "scene_init.txt"):
        src = _path(args, args.dataset) / name
        if src.exists():
            (out / name).write_text(src.read_text())
    print(f"rectified {len(ds)} frames into {out} ({w}x{h})")
    return EXIT_OK


def _train_config(args, **overrides) -> TrainConfig:
    rs = args.rs_enable_iter if args.rs_enable_iter is not None else args.iters // 4
    kw = dict(iterations=args.iters, rs_enable_iter=rs, seed=args.seed,
              eval_every=args.eval_every,
              use_viba_trajectory=not args.no_viba, use_motion_sampling=not args.no_motion_sampling,
              use_scene_gamma=not args.no_scene_gamma)
    kw.update(overrides)
    return TrainConfig(**kw)


def _initial_scene(args, ds: CaptureDataset) -> GaussianScene:
    if args.init:
        return GaussianScene.load(_path(args, args.init))
    if ds.points is None:
        raise CliError("dataset has no points.txt; pass --init <scene checkpoint>")
    return init_from_points(ds.points[:, :3], ds.points[:, 3:])


def _run_training(args, ds, cfg: TrainConfig, out: Path) -> dict:
    _, report = train(ds, _initial_scene(args, ds), cfg, out_dir=out)
    print(f"{out.name}: holdout PSNR {report.final_psnr:.3f} dB, SSIM {report.final_ssim:.4f}")
    return {"psnr": report.final_psnr, "ssim": report.final_ssim}


def cmd_train(args) -> int:
    ds = load_dataset(_path(args, args.dataset))
    _run_training(args, ds, _train_config(args), _path(args, args.out))
    return EXIT_OK


def _render_setup(args):
    ds = load_dataset(_path(args, args.dataset))
    scene = GaussianScene.load(_path(args, args.checkpoint))
    traj = ds.trajectory if args.no_viba else ds.refined_trajectory()
    _, held = split_holdout(range(len(ds)), args.holdout_stride)
    frames = list(range(len(ds))) if args.all_frames else held
    use_ms = not args.no_motion_sampling
    plans = frame_plans(ds, traj, frames) if use_ms else {}
    mode = FormationMode(motion_sampling=use_ms, scene_gamma=scene.color_space == "gamma")
    return ds, scene, traj, frames, plans, mode


def cmd_render(args) -> int:
    ds, scene, traj, frames, plans, mode = _render_setup(args)
    out = _path(args, args.out)
    out.mkdir(parents=True, exist_ok=True)
    means = {}
    for boost in sorted({1.0, args.gain_boost}):
        sub = out if boost == 1.0 else out / f"gain_x{boost:g}"
        sub.mkdir(parents=True, exist_ok=True)
        lum = []
        for i in frames:
            meta = replace(ds.metas[i], gain=ds.metas[i].gain * boost)
            img = form_image(scene, traj, ds.camera, meta, ds.maps, plans.get(i), mode, ds.formation)
            _save_rgb(sub / f"{meta.frame_id:06d}.png", img.pixels)
            lum.append(float(np.mean(img.pixels[img.valid])))
        means[f"{boost:g}"] = float(np.mean(lum))
    (out / "render_summary.json").write_text(json.dumps({"frames": frames, "mean_luminance": means},
                                                        indent=1))
    for k, v in means.items():
        print(f"gain x{k}: mean response {v:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds, scene, traj, frames, plans, mode = _render_setup(args)
    rows = []
    for i in frames:
        img = form_image(scene, traj, ds.camera, ds.metas[i], ds.maps, plans.get(i), mode, ds.formation)
        rows.append({"frame_id": ds.metas[i].frame_id, "psnr": psnr(img.pixels, ds.images[i], img.valid),
                     "ssim": ssim(img.pixels, ds.images[i], img.valid)})
    result = {"psnr": float(np.mean([r["psnr"] for r in rows])),
              "ssim": float(np.mean([r["ssim"] for r in rows])), "frames": rows}
    if args.out:
        out = _path(args, args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(json.dumps(result, indent=1, sort_keys=True))
    print(f"holdout PSNR {result['psnr']:.3f} dB, SSIM {result['ssim']:.4f} over {len(rows)} frames")
    return EXIT_OK


def cmd_reproj_stats(args) -> int:
    ds = load_dataset(_path(args, args.dataset))
    traj = ds.refined_trajectory() if args.gt else ds.trajectory
    rows, skipped = reproj_percentiles(ds, traj)
    table, plot = write_reproj_report(rows, _path(args, args.out))
    if skipped:
        print(f"skipped {skipped} frame(s) without depth anchors", file=sys.stderr)
    med = float(np.median([r.p50 for r in rows])) if rows else float("nan")
    print(f"median p50 displacement {med:.2f} px; wrote {table} and {plot}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    ds = load_dataset(_path(args, args.dataset))
    out = _path(args, args.out)
    scene_name = Path(args.dataset).name or "scene"
    results = {}
    for name, flags in ABLATIONS.items():
        cfg = _train_config(args, **flags)
        slug = name.replace("w/o ", "no_").replace(" ", "_").lower()
        results[name] = {scene_name: _run_training(args, ds, cfg, out / slug)}
    text = ablation_table(results, out / "ablation.csv")
    (out / "ablation.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=30000)
    p.add_argument("--rs-enable-iter", type=int, default=None,
                   help="iteration at which rolling-shutter sampling starts (default iters/4)")
    p.add_argument("--eval-every", type=int, default=1000)
    p.add_argument("--init", help="scene checkpoint to start from (default: dataset points)")
    p.add_argument("--seed", type=int, default=0)


def _add_ablation_flags(p: argparse.ArgumentParser, with_gamma: bool = True) -> None:
    p.add_argument("--no-viba", action="store_true", help="use the delivered (degraded) trajectory")
    p.add_argument("--no-motion-sampling", action="store_true")
    if with_gamma:
        p.add_argument("--no-scene-gamma", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="egosplat", description=__doc__.splitlines()[0])
    parser.add_argument("--root", default=".", help="base directory for relative paths")
    parser.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    parser.add_argument("--config", help="plain-text 'key = value' defaults; flags win")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic capture")
    p.add_argument("--out", required=True)
    p.add_argument("--scene", choices=("grid", "room", "clutter"), default="grid")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--profile", choices=("static", "orbit", "head_scan"), default="head_scan")
    p.add_argument("--duration", type=float, default=3.5)
    p.add_argument("--peak-deg-s", type=float, default=200.0)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--focal", type=float, default=None)
    p.add_argument("--readout", type=float, default=16e-3)
    p.add_argument("--exposure-policy", choices=("auto", "fixed"), default="auto")
    p.add_argument("--exposure", type=float, default=1e-3)
    p.add_argument("--exposure-cap", type=float, default=2e-3)
    p.add_argument("--frame-rate", type=float, default=10.0)
    p.add_argument("--photons-per-unit", type=float, default=None)
    p.add_argument("--vignette-corner", type=float, default=0.6)
    p.add_argument("--radiance-scale", type=float, default=1.0, help="below 1 simulates a dim scene")
    p.add_argument("--raw-model", choices=("pinhole", "fisheye"), default="pinhole")
    p.add_argument("--rot-noise-deg", type=float, default=0.3)
    p.add_argument("--trans-noise-mm", type=float, default=2.0)
    p.add_argument("--time-offset-ms", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("preprocess", help="rectify a raw capture to a pinhole camera")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--focal", type=float, default=None)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="fit a scene to a preprocessed capture")
    _add_train_flags(p)
    _add_ablation_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("render", cmd_render, "render holdout frames from a checkpoint"),
                                 ("eval", cmd_eval, "holdout PSNR/SSIM of a checkpoint")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--dataset", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--out", required=name == "render")
        p.add_argument("--holdout-stride", type=int, default=8)
        p.add_argument("--all-frames", action="store_true")
        _add_ablation_flags(p, with_gamma=False)
        if name == "render":
            p.add_argument("--gain-boost", type=float, default=1.0,
                           help="extra gain applied before the response curve")
        p.set_defaults(func=func)

    p = sub.add_parser("reproj-stats", help="readout-window reprojection percentiles")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gt", action="store_true", help="use the ground-truth trajectory")
    p.set_defaults(func=cmd_reproj_stats)

    p = sub.add_parser("ablate", help="train the four ablation configurations and tabulate")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate, no_viba=False, no_motion_sampling=False, no_scene_gamma=False)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    # globals only: the subcommand's required flags may come from the config file
    glob = argparse.ArgumentParser(add_help=False)
    glob.add_argument("--root", default=".")
    glob.add_argument("--config")
    pre, rest = glob.parse_known_args(argv)
    choices = parser._subparsers._group_actions[0].choices
    command = next((a for a in rest if a in choices), None)
    if pre.config and command is not None:
        values = read_config_file(_path(pre, pre.config))
        sub = choices[command]
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, value in values.items():
            if key not in known:
                raise CliError(f"config key {key!r} is not an option of '{command}'")
            action = known[key]
            if isinstance(action, argparse._StoreTrueAction):
                defaults[key] = value.lower() in ("1", "true", "yes", "on")
            else:
                defaults[key] = action.type(value) if action.type else value
        sub.set_defaults(**defaults)
        for action in sub._actions:
            if action.dest in defaults:
                action.required = False
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        import numba

        os.environ["OMP_NUM_THREADS"] = str(args.threads)
        numba.set_num_threads(max(1, min(args.threads, numba.config.NUMBA_NUM_THREADS)))
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (EgoSplatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
