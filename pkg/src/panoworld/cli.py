"""Command-line pipeline. One subcommand per stage.

Exit status: 0 success, 1 domain/format error, 2 usage error. Errors are
written to stderr as one JSON object per line.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import PipelineConfig
from .errors import DimensionMismatchError, DomainError, FormatError
from .gaussians import OptimConfig, TrainingView, init_gaussians, optimize_gaussians, render_gaussians
from .mesh import build_scene_mesh
from .pano import (
    CameraPose,
    PerspectiveViewSpec,
    coverage_map,
    default_crop_layout,
    mask_to_perspective,
    pano_to_perspective,
    pluecker_embedding,
)
from .raster import render_guidance_video
from .recon import align_depth_scales, fuse_point_cloud, select_keyframes
from .routes import Route, RouteParams, RouteSampler


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _record(kind, message, **extra):
    rec = {"error": kind, "message": message}
    rec.update({k: v for k, v in extra.items() if v is not None})
    return json.dumps(rec, sort_keys=True)


def _emit(data):
    print(json.dumps(data, sort_keys=True))


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError("missing required options: " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _read_pano(path):
    img = io.read_png_rgb(path)
    H, W = img.shape[:2]
    if W != 2 * H:
        raise DomainError(f"panorama {path} is {W}x{H}; equirect images need W = 2H")
    return img


def _pose_from(args):
    if getattr(args, "traj", None) is None:
        return CameraPose.identity()
    traj = io.read_trajectory_json(args.traj)
    if not 0 <= args.frame < traj.n_frames:
        raise DomainError(f"frame {args.frame} outside trajectory of {traj.n_frames} poses")
    return traj[args.frame]


def _pipeline(**overrides) -> PipelineConfig:
    """Validate the numeric settings a command uses against the config ranges."""
    return PipelineConfig(**overrides)


# --- commands ----------------------------------------------------------------

def cmd_mesh_build(args):
    _require(args, "pano", "depth", "out")
    mesh = build_scene_mesh(_read_pano(args.pano), io.read_depth_pfm(args.depth), _pose_from(args), args.tau)
    io.write_mesh_ply(mesh, args.out)
    _emit({"vertices": mesh.n_vertices, "faces": mesh.n_faces, "invisible": int((~mesh.visible).sum()), "out": args.out})


def cmd_render_traj(args):
    _require(args, "pano", "depth", "traj", "out_dir")
    pano = _read_pano(args.pano)
    depth = io.read_depth_pfm(args.depth)
    traj = io.read_trajectory_json(args.traj)
    mesh = build_scene_mesh(pano, depth, _pose_from(argparse.Namespace(traj=args.source_traj, frame=0)), args.tau)
    H = args.height or depth.shape[0]
    _pipeline(width=2 * H, height=H, tau=args.tau)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = render_guidance_video(mesh, traj, 2 * H, H)
    for i, fr in enumerate(frames):
        io.write_png_rgb(fr.rgb, out / f"rgb_{i:04d}.png")
        io.write_mask_png(fr.mask, out / f"mask_{i:04d}.png")
    _emit({"frames": len(frames), "out_dir": str(out)})


def cmd_sample_route(args):
    _require(args, "scene", "out")
    params = RouteParams(
        min_len=args.min_len,
        n_frames=args.frames,
        lam=args.lam,
        iters=args.smooth_iters,
        step=args.step,
        margin=args.margin,
        camera_height=args.camera_height,
        max_attempts=args.max_attempts,
    )
    _pipeline(route=params, seed=args.seed)
    walk, boxes = io.read_scene_json(args.scene)
    result = RouteSampler(walk, boxes, params).draw(args.seed)
    if not isinstance(result, Route):
        raise DomainError(f"route-rejected: {result.reason} after {result.attempts} attempts ({result.counts})")
    io.write_trajectory_json(result.trajectory, args.out)
    _emit({"frames": result.trajectory.n_frames, "attempts": result.attempts, "out": args.out})


def _layout(args):
    return default_crop_layout(size=args.size, fov=math.radians(args.fov))


def cmd_crop(args):
    _require(args, "pano", "out_dir")
    pano = _read_pano(args.pano)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    layout = _layout(args)
    for k, spec in enumerate(layout):
        io.write_png_rgb(pano_to_perspective(pano, spec), out / f"crop_{k:02d}.png")
    io.dump_json(
        {"views": [{"yaw": s.yaw, "pitch": s.pitch, "fov": s.fov, "size": s.size} for s in layout]},
        out / "layout.json",
    )
    _emit({"views": len(layout), "out_dir": str(out)})


def cmd_pluecker(args):
    _require(args, "traj", "out")
    _pipeline(width=args.width, height=args.height)
    traj = io.read_trajectory_json(args.traj)
    maps = np.stack([pluecker_embedding(p, args.width, args.height) for p in traj])
    with io.atomic_write(args.out) as fh:
        np.save(fh, maps)
    _emit({"shape": list(maps.shape), "out": args.out})


def cmd_align_depth(args):
    _require(args, "depths", "traj", "out_dir")
    depths = [io.read_depth_pfm(p) for p in args.depths]
    traj = io.read_trajectory_json(args.traj)
    if traj.n_frames != len(depths):
        raise DomainError(f"{len(depths)} depth maps but {traj.n_frames} trajectory poses")
    scales = align_depth_scales(depths, list(traj), args.tau)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, (d, s) in enumerate(zip(depths, scales)):
        io.write_depth_pfm(d * s, out / f"aligned_{k:04d}.pfm")
    io.dump_json({"scales": [float(s) for s in scales]}, out / "scales.json")
    _emit({"scales": [float(s) for s in scales]})


def _keyframe_inputs(args):
    if len(args.panos) != len(args.depths):
        raise DomainError(f"{len(args.panos)} panoramas but {len(args.depths)} depth maps")
    traj = io.read_trajectory_json(args.traj)
    if traj.n_frames != len(args.panos):
        raise DomainError(f"{len(args.panos)} frames but {traj.n_frames} trajectory poses")
    keys = select_keyframes(len(args.panos), args.keyframe_stride)
    return keys, traj


def _read_masks(args, keys, shapes):
    """Guidance validity masks for the keyframes, or None when not given."""
    if not args.masks:
        return None
    if len(args.masks) != len(args.panos):
        raise DomainError(f"{len(args.panos)} panoramas but {len(args.masks)} masks")
    out = []
    for k, shape in zip(keys, shapes):
        m = io.read_mask_png(args.masks[k])
        if m.shape != shape:
            raise DimensionMismatchError(f"mask {args.masks[k]} is {m.shape}, panorama is {shape}")
        out.append(m)
    return out


def cmd_recon_init(args):
    _require(args, "panos", "depths", "traj", "out")
    keys, traj = _keyframe_inputs(args)
    panos = [_read_pano(args.panos[k]) for k in keys]
    depths = [io.read_depth_pfm(args.depths[k]) for k in keys]
    poses = [traj[k] for k in keys]
    masks = _read_masks(args, keys, [p.shape[:2] for p in panos])
    scales = align_depth_scales(depths, poses, args.tau) if args.align else np.ones(len(keys))
    pts = fuse_point_cloud(panos, depths, poses, scales, args.point_stride, args.tau, masks)
    width = panos[0].shape[1] / args.point_stride
    cloud = init_gaussians(pts.positions, pts.colors, pts.distances, width)
    io.write_gaussians_ply(cloud, args.out)
    _emit({"keyframes": keys, "gaussians": len(cloud), "scales": [float(s) for s in scales], "out": args.out})


def cmd_recon_opt(args):
    _require(args, "cloud", "panos", "traj", "out")
    traj = io.read_trajectory_json(args.traj)
    if traj.n_frames != len(args.panos):
        raise DomainError(f"{len(args.panos)} frames but {traj.n_frames} trajectory poses")
    cfg = OptimConfig(iters=args.iters, lr=args.lr, seed=args.seed)
    _pipeline(optimizer=cfg, seed=args.seed)
    cloud = io.read_gaussians_ply(args.cloud)
    layout = default_crop_layout(size=args.crop_size)
    keys = select_keyframes(len(args.panos), args.keyframe_stride)
    panos = [_read_pano(args.panos[k]) for k in keys]
    masks = _read_masks(args, keys, [p.shape[:2] for p in panos]) or [None] * len(keys)
    views = []
    for k, pano, mask in zip(keys, panos, masks):
        for spec in layout:
            crop_mask = None if mask is None else mask_to_perspective(mask, spec)
            views.append(TrainingView(traj[k], spec, pano_to_perspective(pano, spec), crop_mask))
    state = optimize_gaussians(cloud, views, cfg)
    io.write_gaussians_ply(state.cloud, args.out)
    if args.history:
        io.dump_json({"loss": list(state.loss_history)}, args.history)
    hist = state.loss_history
    _emit({"iterations": state.iteration, "first_loss": hist[0] if hist else None, "last_loss": hist[-1] if hist else None, "out": args.out})


def cmd_render_gs(args):
    _require(args, "cloud", "out")
    cloud = io.read_gaussians_ply(args.cloud)
    spec = PerspectiveViewSpec(math.radians(args.yaw), math.radians(args.pitch), math.radians(args.fov), args.size)
    img = render_gaussians(cloud, _pose_from(args), spec)
    io.write_png_rgb(img.rgb, args.out)
    _emit({"out": args.out, "mean_alpha": float(img.alpha.mean())})


def cmd_coverage_check(args):
    _pipeline(width=args.width, height=args.height)
    layout = _layout(args)
    counts = coverage_map(layout, args.height, args.width)
    fovs = [math.degrees(s.fov) for s in layout]
    result = {
        "views": len(layout),
        "min_count": int(counts.min()),
        "max_count": int(counts.max()),
        "fov_range_ok": all(60.0 <= f <= 120.0 for f in fovs),
    }
    _emit(result)
    if result["min_count"] < 1:
        raise DomainError(f"layout leaves {int((counts == 0).sum())} pixels uncovered")


# --- parser ------------------------------------------------------------------

def _build_parser():
    p = _Parser(prog="panoworld", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    subs = {}

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON file whose keys mirror this command's flags")
        sp.set_defaults(func=fn)
        subs[name] = sp
        return sp

    def tau(sp):
        sp.add_argument("--tau", type=float, default=0.2)

    def pose(sp):
        sp.add_argument("--traj")
        sp.add_argument("--frame", type=int, default=0)

    sp = add("mesh-build", cmd_mesh_build, "build the scene mesh PLY from a panorama and its depth")
    sp.add_argument("--pano")
    sp.add_argument("--depth")
    sp.add_argument("--out")
    tau(sp)
    pose(sp)

    sp = add("render-traj", cmd_render_traj, "render guidance RGB/mask frames along a trajectory")
    sp.add_argument("--pano")
    sp.add_argument("--depth")
    sp.add_argument("--traj")
    sp.add_argument("--source-traj", help="trajectory whose first pose is the panorama's pose")
    sp.add_argument("--height", type=int)
    sp.add_argument("--out-dir")
    tau(sp)

    sp = add("sample-route", cmd_sample_route, "sample a camera route over a scene file")
    sp.add_argument("--scene")
    sp.add_argument("--out", default="trajectory.json")
    sp.add_argument("--seed", type=int, default=0)
    d = RouteParams()
    sp.add_argument("--min-len", type=float, default=d.min_len)
    sp.add_argument("--frames", type=int, default=d.n_frames)
    sp.add_argument("--lam", type=float, default=d.lam)
    sp.add_argument("--smooth-iters", type=int, default=d.iters)
    sp.add_argument("--step", type=float, default=d.step)
    sp.add_argument("--margin", type=float, default=d.margin)
    sp.add_argument("--camera-height", type=float, default=d.camera_height)
    sp.add_argument("--max-attempts", type=int, default=d.max_attempts)

    def layout_flags(sp):
        sp.add_argument("--size", type=int, default=512)
        sp.add_argument("--fov", type=float, default=100.0, help="degrees")

    sp = add("crop", cmd_crop, "cut the 12-view perspective layout out of a panorama")
    sp.add_argument("--pano")
    sp.add_argument("--out-dir")
    layout_flags(sp)

    sp = add("pluecker", cmd_pluecker, "spherical Pluecker maps (T, H, W, 6) as .npy")
    sp.add_argument("--traj")
    sp.add_argument("--width", type=int, default=1024)
    sp.add_argument("--height", type=int, default=512)
    sp.add_argument("--out")

    sp = add("align-depth", cmd_align_depth, "least-squares scale registration of keyframe depths")
    sp.add_argument("--depths", nargs="+")
    sp.add_argument("--traj")
    sp.add_argument("--out-dir")
    tau(sp)

    sp = add("recon-init", cmd_recon_init, "initialize Gaussians from keyframe panoramas and depths")
    sp.add_argument("--panos", nargs="+")
    sp.add_argument("--depths", nargs="+")
    sp.add_argument("--masks", nargs="+", help="guidance validity masks; invalid pixels are not fused")
    sp.add_argument("--traj")
    sp.add_argument("--keyframe-stride", type=int, default=5)
    sp.add_argument("--point-stride", type=int, default=1)
    sp.add_argument("--align", action=argparse.BooleanOptionalAction, default=True)
    sp.add_argument("--out")
    tau(sp)

    sp = add("recon-opt", cmd_recon_opt, "optimize Gaussian color/opacity against keyframe crops")
    sp.add_argument("--cloud")
    sp.add_argument("--panos", nargs="+")
    sp.add_argument("--masks", nargs="+", help="guidance validity masks; invalid pixels carry no loss")
    sp.add_argument("--traj")
    sp.add_argument("--keyframe-stride", type=int, default=5)
    sp.add_argument("--crop-size", type=int, default=512)
    sp.add_argument("--iters", type=int, default=500)
    sp.add_argument("--lr", type=float, default=OptimConfig().lr)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--history")
    sp.add_argument("--out")

    sp = add("render-gs", cmd_render_gs, "render a Gaussian PLY into a perspective view")
    sp.add_argument("--cloud")
    pose(sp)
    sp.add_argument("--yaw", type=float, default=0.0, help="degrees")
    sp.add_argument("--pitch", type=float, default=0.0, help="degrees")
    sp.add_argument("--fov", type=float, default=90.0, help="degrees")
    sp.add_argument("--size", type=int, default=512)
    sp.add_argument("--out")

    sp = add("coverage-check", cmd_coverage_check, "verify the crop layout covers the full sphere")
    sp.add_argument("--height", type=int, default=256)
    sp.add_argument("--width", type=int, default=512)
    layout_flags(sp)
    return p, subs


def _parse(argv):
    parser, subs = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("a subcommand is required")
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"cannot read config: {exc}", path=args.config) from None
        if not isinstance(cfg, dict):
            raise FormatError("config must be a JSON object", path=args.config)
        known = set(vars(args)) - {"func", "command", "config"}
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = set(cfg) - known
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {sorted(unknown)}")
        subs[args.command].set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _parse(argv)
        args.func(args)
    except UsageError as exc:
        print(_record("usage", str(exc)), file=sys.stderr)
        return 2
    except FormatError as exc:
        print(_record(exc.kind, str(exc), path=exc.path, offset=exc.offset), file=sys.stderr)
        return 1
    except DomainError as exc:
        extra = {"frame": getattr(exc, "frame", None), "cell": getattr(exc, "cell", None)}
        print(_record(exc.kind, str(exc), **extra), file=sys.stderr)
        return 1
    except OSError as exc:
        print(_record("io", str(exc), path=getattr(exc, "filename", None)), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
