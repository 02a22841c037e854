"""Command-line entry points: train, render, eval, export, make-toy."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml


def _threads_from_env() -> None:
    """PLENOXEL_THREADS caps worker threads; kernels run single-threaded, so
    this is an upper bound on numba's pool rather than a request for more."""
    val = os.environ.get("PLENOXEL_THREADS")
    if not val:
        return
    try:
        import numba
        numba.set_num_threads(max(1, min(int(val), numba.config.NUMBA_NUM_THREADS)))
    except (ValueError, ImportError):
        pass


def _require(parser: argparse.ArgumentParser, path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        parser.error(f"{what} not found: {p}")
    return p


def cmd_train(parser, args) -> int:
    from . import plots
    from .camera import load_nerf_dataset
    from .trainer import (apply_override, config_from_dict, config_to_dict,
                          default_config, load_config, save_config, train)
    from .artifact_io import save_grid

    data_dir = _require(parser, args.data, "dataset path")
    if args.config is not None:
        cfg = load_config(_require(parser, args.config, "config path"))
    else:
        cfg = default_config(args.scene_type)
    cfg_dict = config_to_dict(cfg)
    for ov in args.override or []:
        if "=" not in ov:
            parser.error(f"override must look like key=value, got {ov!r}")
        key, _, raw = ov.partition("=")
        apply_override(cfg_dict, key.strip(), yaml.safe_load(raw))
    cfg = config_from_dict(cfg_dict)
    if args.seed is not None:
        cfg.seed = args.seed

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config_resolved.yaml")

    train_ds = load_nerf_dataset(data_dir, cfg.scene_type, "train",
                                 background=cfg.background,
                                 downscale=args.downscale)
    test_ds = None
    if (data_dir / "transforms_test.json").exists() or \
            (data_dir / "poses_bounds.npy").exists():
        try:
            test_ds = load_nerf_dataset(data_dir, cfg.scene_type, "test",
                                        background=cfg.background,
                                        downscale=args.downscale)
        except Exception:
            test_ds = None

    metrics_path = out / "metrics.jsonl"
    t0 = time.perf_counter()
    with open(metrics_path, "w") as mf:
        def sink(rec):
            mf.write(json.dumps(rec) + "\n")
            mf.flush()

        result = train(train_ds, cfg, test_ds=test_ds, out_dir=out,
                       metrics_sink=sink, progress=not args.quiet)

    save_grid(result.grid, out / "grid.plnx", result.background)
    evals = [m for m in result.metrics if "psnr" in m]
    summary = {
        "steps": cfg.total_steps,
        "psnr": evals[-1]["psnr"] if evals else None,
        "ssim": evals[-1]["ssim"] if evals else None,
        "wall_time_s": time.perf_counter() - t0,
        "rows": result.grid.n_rows,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    plots.save_training_curves(result.metrics, out / "training_curves.png")
    if summary["psnr"] is not None:
        print(f"final psnr {summary['psnr']:.2f} dB  ssim {summary['ssim']:.4f}")
    print(f"artifact written to {out / 'grid.plnx'}")
    return 0


def cmd_render(parser, args) -> int:
    from .artifact_io import load_grid, write_image
    from .camera import Camera
    from .msi import render_rays_with_background
    from .render import RenderOptions, render_image
    from .camera import generate_rays

    artifact = _require(parser, args.artifact, "artifact path")
    cam_path = _require(parser, args.camera_json, "camera json")
    grid, background = load_grid(artifact)
    meta = json.loads(Path(cam_path).read_text())
    frames = meta.get("frames", [])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    opts = RenderOptions(step_frac=args.step_frac,
                         background=tuple(args.background))
    for i, frame in enumerate(frames):
        c2w = np.asarray(frame["transform_matrix"], dtype=np.float64)
        w = int(frame.get("w", meta.get("w", args.width)))
        h = int(frame.get("h", meta.get("h", args.width)))
        focal = 0.5 * w / math.tan(0.5 * float(meta["camera_angle_x"]))
        cam = Camera(c2w=c2w, focal=focal, width=w, height=h)
        if background is not None:
            o, d = generate_rays(cam)
            o = o * args.scene_scale
            img = np.empty((o.shape[0], 3))
            for s in range(0, o.shape[0], 65536):
                rgb = render_rays_with_background(
                    grid, background, o[s:s + 65536], d[s:s + 65536], opts)[0]
                img[s:s + 65536] = rgb
            img = img.reshape(h, w, 3)
        else:
            img = render_image(grid, cam, opts)
        write_image(img, out / f"r_{i:03d}.png")
    print(f"rendered {len(frames)} view(s) into {out}")
    return 0


def cmd_eval(parser, args) -> int:
    from . import plots
    from .artifact_io import load_grid
    from .camera import load_nerf_dataset
    from .render import RenderOptions
    from .trainer import evaluate, train_split_scene_scale

    artifact = _require(parser, args.artifact, "artifact path")
    data_dir = _require(parser, args.data, "dataset path")
    grid, background = load_grid(artifact)
    scene_type = args.scene_type
    ds = load_nerf_dataset(data_dir, scene_type, "test",
                           background=tuple(args.background),
                           downscale=args.downscale)
    opts = RenderOptions(step_frac=args.step_frac,
                         background=tuple(args.background))
    scene_scale = 1.0
    if scene_type == "unbounded_360":
        # the prescale is a deterministic function of the training cameras
        scene_scale = train_split_scene_scale(data_dir)
    mean_psnr, mean_ssim, rows = evaluate(grid, ds, opts, background,
                                          scene_scale)
    print(f"PSNR: {mean_psnr:.3f}")
    print(f"SSIM: {mean_ssim:.4f}")
    if args.report_dir:
        plots.save_eval_report(rows, args.report_dir)
        print(f"per-view report written to {args.report_dir}")
    return 0


def cmd_export(parser, args) -> int:
    from .artifact_io import load_grid, save_grid

    artifact = _require(parser, args.artifact, "artifact path")
    grid, background = load_grid(artifact)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_grid(grid, out, background)

    center = (grid.aabb_min + grid.aabb_max) / 2
    radius = float(np.linalg.norm(grid.aabb_max - grid.aabb_min)) * 1.1
    pos = center + radius * np.array([0.6, -0.6, 0.52])
    zc = (pos - center) / np.linalg.norm(pos - center)
    xc = np.cross([0.0, 0.0, 1.0], zc)
    xc /= np.linalg.norm(xc)
    yc = np.cross(zc, xc)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = xc, yc, zc, pos
    manifest = {
        "file": out.name,
        "dims": list(grid.dims),
        "suggested_pose": pose.tolist(),
        "has_background": background is not None,
    }
    manifest_path = out.with_suffix(".json")
    manifest_path.write_text(json.dumps(manifest, indent=1))
    print(f"exported {out} (+ {manifest_path.name})")
    return 0


def cmd_make_toy(parser, args) -> int:
    from .toy import make_toy_dataset

    out = make_toy_dataset(args.out, n_views=args.views, res=args.res,
                           n_test=args.test_views, grid_dim=args.grid_dim,
                           step_frac=args.step_frac, seed=args.seed)
    print(f"toy dataset written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plenoxel",
        description="Sparse voxel radiance fields: direct optimization of a "
                    "voxel grid of opacities and SH colors from calibrated "
                    "images, plus rendering and evaluation tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="optimize a grid on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help="YAML config (default: per-scene-type)")
    p.add_argument("--scene-type", default="bounded",
                   choices=["bounded", "forward_facing_ndc", "unbounded_360"],
                   help="used when no --config is given")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--override", action="append", metavar="KEY=VALUE",
                   help="dotted config override, repeatable")
    p.add_argument("--downscale", type=int, default=1,
                   help="integer image downscale factor")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render views of a trained artifact")
    p.add_argument("--artifact", required=True)
    p.add_argument("--camera-json", required=True,
                   help="frames schema: camera_angle_x + transform_matrix list")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--width", type=int, default=800,
                   help="image size when the json does not carry w/h")
    p.add_argument("--step-frac", type=float, default=0.5)
    p.add_argument("--background", type=float, nargs=3, default=[1.0, 1.0, 1.0])
    p.add_argument("--scene-scale", type=float, default=1.0,
                   help="camera prescale for 360 artifacts (the factor "
                        "training derived from its cameras)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM over a dataset's test split")
    p.add_argument("--artifact", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scene-type", default="bounded",
                   choices=["bounded", "forward_facing_ndc", "unbounded_360"])
    p.add_argument("--step-frac", type=float, default=0.5)
    p.add_argument("--background", type=float, nargs=3, default=[1.0, 1.0, 1.0])
    p.add_argument("--downscale", type=int, default=1)
    p.add_argument("--report-dir", help="write per-view CSV + figures here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="re-emit a grid + viewer manifest")
    p.add_argument("--artifact", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("make-toy", help="generate the procedural oracle scene")
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=25)
    p.add_argument("--test-views", type=int, default=10)
    p.add_argument("--res", type=int, default=128)
    p.add_argument("--grid-dim", type=int, default=64)
    p.add_argument("--step-frac", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_toy)
    return parser


def main(argv=None) -> int:
    _threads_from_env()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(parser, args)
    except Exception as e:  # one-line cause, nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
