"""Command-line entry points: gen, reconstruct, eval, mesh, render."""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .errors import (
    ConfigError,
    LengthMismatch,
    LevelSfmError,
    MissingImage,
    ParseError,
    UnknownScene,
)

_INPUT_ERRORS = (
    FileNotFoundError,
    IsADirectoryError,
    PermissionError,
    ParseError,
    ConfigError,
    UnknownScene,
    MissingImage,
    LengthMismatch,
    ValueError,
)


def _error_json(exc, **extra):
    payload = {"error": type(exc).__name__, "message": str(exc), **extra}
    print(json.dumps(payload, sort_keys=True))


def _add_config_flags(parser):
    """Every scalar RunConfig field becomes a --flag override."""
    for f in dataclasses.fields(RunConfig):
        if f.name == "seed":
            continue  # the top-level --seed flag owns this
        if f.type in ("int", "float", "str", int, float, str):
            typ = {"int": int, "float": float, "str": str}.get(f.type, f.type)
            parser.add_argument(
                f"--{f.name.replace('_', '-')}", type=typ, default=None,
                dest=f"cfg_{f.name}", help=f"override config {f.name}",
            )


def _load_config(args):
    if getattr(args, "config", None):
        cfg = RunConfig.from_json(Path(args.config).read_text())
    else:
        cfg = RunConfig()
    overrides = {
        name[len("cfg_"):]: val
        for name, val in vars(args).items()
        if name.startswith("cfg_") and val is not None
    }
    if overrides:
        d = cfg.to_dict()
        d.update(overrides)
        cfg = RunConfig.from_dict(d)
    return cfg


def cmd_gen(args):
    from .synthetic import generate_scene, write_scene

    scene = generate_scene(
        args.scene, n_views=args.views, sigma_px=args.sigma_px,
        rho=args.rho, seed=args.seed, n_points=args.points,
        n_surface=args.surface, pair_window=args.pair_window,
    )
    out = write_scene(scene, args.out, images=not args.no_images)
    print(json.dumps({
        "out": str(out), "scene": args.scene, "views": args.views,
        "matches": sum(len(ja) for ja, _ in scene.matches.values()),
        "diameter": scene.diameter,
    }, sort_keys=True))
    return 0


def _write_outputs(state, out_dir, seed, mesh_resolution,
                   gt_poses_path=None, gt_surface_path=None):
    from .evaluate import evaluate_reconstruction, run_report, write_metrics
    from .export import active_points, export_ply, read_poses, write_poses
    from .fields import save_checkpoint
    from .meshing import marching_cubes, sample_mesh, write_mesh_ply

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_poses(out / "poses.txt", state.poses)
    export_ply(out / "points.ply", state)
    verts = faces = None
    if state.sdf is not None:
        save_checkpoint(out / "checkpoint.bin", state.sdf, state.radiance)
        verts, faces = marching_cubes(
            state.sdf.sdf, mesh_resolution, bound=state.config.bound
        )
        write_mesh_ply(out / "mesh.ply", verts, faces)
    metrics = run_report(state)
    if gt_poses_path and gt_surface_path:
        gt_poses = read_poses(gt_poses_path)
        gt_surface = np.loadtxt(gt_surface_path)
        mesh_samples = None
        if verts is not None and len(faces):
            mesh_samples = sample_mesh(
                verts, faces, 2000, np.random.default_rng(seed)
            )
        metrics["gt"] = evaluate_reconstruction(
            gt_poses, state.poses, gt_surface,
            points=active_points(state), mesh_samples=mesh_samples,
        )
    write_metrics(out / "metrics.json", metrics)
    return metrics


def cmd_reconstruct(args):
    from .pipeline import ingest, reconstruct
    from .synthetic import load_images

    torch.set_num_threads(1)
    cfg = _load_config(args)
    if cfg.seed != args.seed:
        cfg = RunConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    rng = np.random.default_rng(args.seed)
    graph, intr = ingest(
        args.matches, args.intrinsics, rng,
        thresh_px=cfg.ransac_px_pair, min_inliers=cfg.min_pair_inliers,
    )
    images = load_images(args.images) if args.images else None
    try:
        state = reconstruct(graph, intr, cfg, images=images, seed=args.seed)
    except LevelSfmError as exc:
        state = getattr(exc, "state", None)
        extra = {"partial": state is not None}
        if state is not None and args.out:
            try:
                _write_outputs(state, args.out, args.seed, args.mesh_resolution)
            except Exception:
                extra["partial"] = False
        _error_json(exc, **extra)
        return 3
    metrics = _write_outputs(
        state, args.out, args.seed, args.mesh_resolution,
        gt_poses_path=args.gt_poses, gt_surface_path=args.gt_surface,
    )
    print(json.dumps({
        "out": str(args.out),
        "registered": metrics["n_registered"],
        "active_points": metrics["n_active_points"],
        "reprojection_energy_px": metrics["reprojection_energy_px"],
    }, sort_keys=True))
    return 0


def cmd_eval(args):
    from .evaluate import evaluate_reconstruction, write_metrics
    from .export import read_ply_points, read_poses
    from .meshing import read_mesh_ply, sample_mesh
    from .pipeline.scene import ACTIVE

    gt_poses = read_poses(args.gt_poses)
    est_poses = read_poses(args.est_poses)
    gt_surface = np.loadtxt(args.gt_surface)
    points = None
    if args.points:
        xyz, _, status = read_ply_points(args.points)
        points = xyz[status == ACTIVE]
    mesh_samples = None
    if args.mesh:
        verts, faces = read_mesh_ply(args.mesh)
        mesh_samples = sample_mesh(verts, faces, 2000, np.random.default_rng(0))
    metrics = evaluate_reconstruction(
        gt_poses, est_poses, gt_surface,
        points=points, mesh_samples=mesh_samples, tau_frac=args.tau_frac,
    )
    if args.out:
        write_metrics(args.out, metrics)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return 0


def cmd_mesh(args):
    from .fields import load_checkpoint
    from .meshing import marching_cubes, write_mesh_ply

    sdf, _, _ = load_checkpoint(args.checkpoint)
    bound = args.bound if args.bound else sdf.encoding.cfg.bound
    verts, faces = marching_cubes(
        sdf.sdf, args.resolution, iso_level=args.iso_level, bound=bound
    )
    write_mesh_ply(args.out, verts, faces)
    print(json.dumps({
        "out": str(args.out), "vertices": int(len(verts)),
        "faces": int(len(faces)),
    }, sort_keys=True))
    return 0


def cmd_render(args):
    from .export import read_poses
    from .fields import load_checkpoint
    from .pipeline.common import pose_tensors, render_pixel_rays
    from .pipeline.ingest import parse_intrinsics
    from .synthetic import _write_png

    torch.set_num_threads(1)
    sdf, radiance, _ = load_checkpoint(args.checkpoint)
    intr = parse_intrinsics(args.intrinsics)
    poses = read_poses(args.poses)
    if args.id not in poses:
        raise ValueError(f"pose id {args.id} not in {args.poses}")
    cfg = RunConfig(beta=args.beta, stamps=args.stamps,
                    bound=sdf.encoding.cfg.bound)
    R, t = pose_tensors(poses[args.id], cfg.torch_dtype())
    ys, xs = np.mgrid[0:intr.height, 0:intr.width]
    px_all = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    img = np.zeros((len(px_all), 3))
    with torch.no_grad():
        for s in range(0, len(px_all), 4096):
            px = torch.as_tensor(px_all[s:s + 4096], dtype=cfg.torch_dtype())
            _, _, rend, ok = render_pixel_rays(
                R, t, intr, px, sdf, radiance, cfg
            )
            img[s:s + 4096] = (
                rend.color * rend.opacity.unsqueeze(-1)
            ).clamp(0, 1).double().numpy()
    _write_png(args.out, img.reshape(intr.height, intr.width, 3))
    print(json.dumps({"out": str(args.out)}, sort_keys=True))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="levelsfm",
        description="Incremental structure-from-motion on a neural "
                    "signed-distance level set.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--scene", required=True)
    g.add_argument("--views", type=int, default=10)
    g.add_argument("--sigma-px", type=float, default=0.0)
    g.add_argument("--rho", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--points", type=int, default=400)
    g.add_argument("--surface", type=int, default=2000)
    g.add_argument("--pair-window", type=int, default=2)
    g.add_argument("--no-images", action="store_true")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("reconstruct", help="run the reconstruction pipeline")
    r.add_argument("--matches", required=True)
    r.add_argument("--intrinsics", required=True)
    r.add_argument("--images", default=None, help="image list file")
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, required=True)
    r.add_argument("--config", default=None, help="RunConfig JSON file")
    r.add_argument("--mesh-resolution", type=int, default=96)
    r.add_argument("--gt-poses", default=None)
    r.add_argument("--gt-surface", default=None)
    _add_config_flags(r)
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("eval", help="evaluate against ground truth")
    e.add_argument("--gt-poses", required=True)
    e.add_argument("--est-poses", required=True)
    e.add_argument("--gt-surface", required=True)
    e.add_argument("--points", default=None, help="points.ply")
    e.add_argument("--mesh", default=None, help="mesh.ply")
    e.add_argument("--tau-frac", type=float, default=0.035)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("mesh", help="extract the zero level set")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--resolution", type=int, default=128)
    m.add_argument("--iso-level", type=float, default=0.0)
    m.add_argument("--bound", type=float, default=None)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mesh)

    v = sub.add_parser("render", help="volume-render one pose")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--intrinsics", required=True)
    v.add_argument("--poses", required=True)
    v.add_argument("--id", type=int, required=True)
    v.add_argument("--beta", type=float, default=0.01)
    v.add_argument("--stamps", type=int, default=64)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_render)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _INPUT_ERRORS as exc:
        _error_json(exc)
        return 2
    except LevelSfmError as exc:
        _error_json(exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
