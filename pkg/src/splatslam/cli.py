"""Command line entry point.

Verbs:
    run       process a dataset and write trajectory, map, and renders
    simulate  emit a synthetic corridor dataset with ground truth
    render    render views of a saved map along a trajectory
    eval      compute ATE and image metrics from saved artifacts

Every verb accepts --seed, --config, and --output-dir. Exit status is 0
on success and 1 on any fatal error, with a diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import dataset as dataset_io
from .config import ConfigError, SlamConfig, format_default_config, load_config
from .dataset import DatasetError, load_dataset
from .gaussian_map import GaussianMap
from .geometry import CameraIntrinsics
from .metrics import ate_rmse, psnr, ssim
from .pipeline import run_slam
from .renderer import render
from .simulator import export_corridor_sequence


def _load_cfg(args) -> SlamConfig:
    cfg = load_config(args.config) if args.config else SlamConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--config", default=None,
                   help="path to a key = value config file")
    p.add_argument("--output-dir", default=None,
                   help="directory for output artifacts")


def _cmd_run(args) -> int:
    cfg = _load_cfg(args)
    if args.no_relocalization:
        cfg.relocalization_enabled = False
    if args.no_refinement:
        cfg.refinement_enabled = False
    out = args.output_dir if args.output_dir else "slam_output"
    report = run_slam(args.dataset, cfg, output_dir=out)
    print(report.format())
    print(f"artifacts written to {out}")
    return 0


def _cmd_simulate(args) -> int:
    out = args.output_dir if args.output_dir else "sim_dataset"
    export_corridor_sequence(
        out,
        n_frames=args.frames,
        scene_seed=args.scene_seed,
        gaussian_count=args.gaussians,
        rays_per_scan=args.rays,
        image_width=args.width,
        image_height=args.height,
        path_length=args.path_length,
        range_noise_sigma=args.noise,
        seed=args.seed if args.seed is not None else 0,
    )
    print(f"wrote {args.frames}-frame dataset to {out}")
    return 0


def _cmd_render(args) -> int:
    gmap = GaussianMap.load_ply(args.map)
    (fx, fy, cx, cy), _ = dataset_io.load_calib(args.calib)
    intrinsics = CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy,
                                  width=args.width, height=args.height)
    times, poses = dataset_io.load_trajectory_tum(args.trajectory)
    out = args.output_dir if args.output_dir else "renders"
    os.makedirs(out, exist_ok=True)
    for i, pose in enumerate(poses):
        frame = render(gmap, intrinsics, pose)
        dataset_io.save_image(os.path.join(out, f"{i:06d}.png"), frame.color)
    print(f"rendered {len(poses)} views to {out}")
    return 0


def _image_pairs(est_dir: str, ref_dir: str) -> list[tuple[str, str]]:
    names = sorted(n for n in os.listdir(est_dir)
                   if n.lower().endswith((".png", ".ppm")))
    pairs = []
    for name in names:
        ref = os.path.join(ref_dir, name)
        if os.path.isfile(ref):
            pairs.append((os.path.join(est_dir, name), ref))
    if not pairs:
        raise ValueError(f"no image pairs shared between {est_dir} and {ref_dir}")
    return pairs


def _cmd_eval(args) -> int:
    lines = []
    if args.groundtruth:
        if not args.estimate:
            raise ValueError("--groundtruth requires --estimate")
        est_t, est_p = dataset_io.load_trajectory_tum(args.estimate)
        gt_t, gt_p = dataset_io.load_trajectory_tum(args.groundtruth)
        ate = ate_rmse(est_t, est_p, gt_t, gt_p)
        lines.append(f"ate_rmse_m {ate:.6f}")
    if args.rendered:
        if not args.reference:
            raise ValueError("--rendered requires --reference")
        vals_psnr, vals_ssim = [], []
        for est_path, ref_path in _image_pairs(args.rendered, args.reference):
            a = dataset_io.load_image(est_path)
            b = dataset_io.load_image(ref_path)
            vals_psnr.append(psnr(a, b))
            vals_ssim.append(ssim(a, b))
        finite = [v for v in vals_psnr if np.isfinite(v)]
        mean_psnr = float(np.mean(finite)) if finite else float("inf")
        lines.append(f"mean_psnr_db {mean_psnr:.4f}")
        lines.append(f"mean_ssim {float(np.mean(vals_ssim)):.6f}")
    if not lines:
        raise ValueError("nothing to evaluate; pass --groundtruth or --rendered")
    text = "\n".join(lines)
    print(text)
    if args.output_dir:
        os.makedirs(args.output_dir, exist_ok=True)
        with open(os.path.join(args.output_dir, "eval.txt"), "w") as fh:
            fh.write(text + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatslam",
        description="LiDAR-camera SLAM on an isotropic Gaussian map")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="run SLAM on a dataset directory")
    p.add_argument("dataset", help="dataset directory")
    p.add_argument("--no-relocalization", action="store_true",
                   help="disable recovery after tracking failure")
    p.add_argument("--no-refinement", action="store_true",
                   help="track with ICP alone, skipping pose refinement")
    _add_common(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("simulate", help="emit a synthetic dataset")
    p.add_argument("--frames", type=int, default=50)
    p.add_argument("--scene-seed", type=int, default=3)
    p.add_argument("--gaussians", type=int, default=6000)
    p.add_argument("--rays", type=int, default=24000)
    p.add_argument("--width", type=int, default=80)
    p.add_argument("--height", type=int, default=90)
    p.add_argument("--path-length", type=float, default=10.0)
    p.add_argument("--noise", type=float, default=0.0,
                   help="range noise sigma in meters")
    _add_common(p)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("render", help="render a saved map along a trajectory")
    p.add_argument("--map", required=True, help="map PLY file")
    p.add_argument("--calib", required=True, help="calib.txt with intrinsics")
    p.add_argument("--trajectory", required=True, help="TUM trajectory file")
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("eval", help="metrics from saved artifacts")
    p.add_argument("--estimate", help="estimated TUM trajectory")
    p.add_argument("--groundtruth", help="ground-truth TUM trajectory")
    p.add_argument("--rendered", help="directory of rendered images")
    p.add_argument("--reference", help="directory of reference images")
    _add_common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("default-config", help="print the default config")
    _add_common(p)
    p.set_defaults(func=_cmd_default_config)

    return parser


def _cmd_default_config(args) -> int:
    text = format_default_config()
    print(text, end="")
    if args.output_dir:
        os.makedirs(args.output_dir, exist_ok=True)
        with open(os.path.join(args.output_dir, "config.txt"), "w") as fh:
            fh.write(text)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
