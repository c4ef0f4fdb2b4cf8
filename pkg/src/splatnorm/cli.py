"""Command-line pipeline: scene synthesis, training, rendering, meshing, eval.

Subcommands mirror the pipeline stages one to one:

    splatnorm make-scene   --kind sphere --cameras 24 --res 128 out_dir
    splatnorm train        scene_dir --lambda-r 0.2 --reg-iters 6000 out_dir
    splatnorm render       gaussians.ply scene_dir --channels color,depth out_dir
    splatnorm extract-mesh gaussians.ply scene_dir --res 128 out_base
    splatnorm eval         gaussians.ply scene_dir --report report.json

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Every command
writes a run manifest (config snapshot, seed, output paths, sha256 hashes of
produced files) next to its outputs; the manifest file is written atomically
at start and finalized with hashes at the end.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import formats, meshing, metrics, sdf
from .losses import LossWeights, dssim_loss, l1_loss
from .optim import TrainConfig, train
from .rasterizer import RenderConfig, render
from .scenes import SCENE_KINDS, generate_synthetic_scene, load_scene, save_scene

MANIFEST_NAME = "run_manifest.json"


def _apply_thread_cap(n: int | None) -> None:
    if n is None:
        n = int(os.environ.get("SPLATNORM_THREADS", "0")) or None
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        import numba

        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
    except Exception:
        pass


class RunManifest:
    """Config snapshot + artifact hashes, written atomically start and end."""

    def __init__(self, directory, command: str, config: dict):
        self.path = Path(directory) / MANIFEST_NAME
        self.data = {
            "command": command,
            "config": config,
            "outputs": [],
            "artifact_hashes": {},
            "completed": False,
        }
        self._write()

    def _write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        with open(tmp, "w") as f:
            json.dump(self.data, f, indent=1, sort_keys=True)
        os.replace(tmp, self.path)

    def finalize(self, outputs: list) -> None:
        self.data["outputs"] = [str(p) for p in outputs]
        for p in outputs:
            digest = hashlib.sha256(Path(p).read_bytes()).hexdigest()
            self.data["artifact_hashes"][str(p)] = digest
        self.data["completed"] = True
        self._write()


def cmd_make_scene(args) -> int:
    out = Path(args.out_dir)
    manifest = RunManifest(out, "make-scene", {
        "kind": args.kind, "cameras": args.cameras, "res": args.res, "seed": args.seed,
    })
    scene = generate_synthetic_scene(args.kind, n_cameras=args.cameras,
                                     resolution=args.res, seed=args.seed)
    save_scene(scene, out)
    produced = sorted(str(p) for p in out.rglob("*") if p.is_file() and p.name != MANIFEST_NAME)
    manifest.finalize(produced)
    print(f"wrote {len(scene.cameras)} cameras ({len(scene.train_indices)} train, "
          f"{len(scene.heldout_indices)} held out) to {out}")
    return 0


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig(
        regularized_iters=args.reg_iters,
        weights=LossWeights(lambda_r=args.lambda_r),
        seed=args.seed,
        deterministic=args.deterministic,
    )
    if args.scale != 1.0:
        cfg = cfg.scaled(args.scale)
    if args.stages:
        v, o, r, total = (int(x) for x in args.stages.split(","))
        from dataclasses import replace

        cfg = replace(cfg, vanilla_iters=v, opacity_iters=o, regularized_iters=r,
                      total_iters=total)
    return cfg


def cmd_train(args) -> int:
    scene = load_scene(args.scene_dir)
    cfg = _train_config(args)
    if cfg.weights.lambda_r > 0 and cfg.regularized_iters > 0 and scene.normal_maps is None:
        print("error: scene has no normal maps but --lambda-r > 0", file=sys.stderr)
        return 1
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out, "train", {
        "scene_dir": str(args.scene_dir), "lambda_r": args.lambda_r,
        "reg_iters": args.reg_iters, "seed": args.seed,
        "deterministic": args.deterministic, "scale": args.scale,
        "stages": list(cfg.stage_boundaries()),
    })
    trace_path = out / "trace.jsonl"
    result = train(scene, cfg, log_file=trace_path)
    ply_path = out / "gaussians.ply"
    formats.save_gaussians(result.gaussians, ply_path)
    metrics_path = out / "metrics.json"
    with open(metrics_path, "w") as f:
        json.dump({
            "heldout_psnr": result.heldout_psnr,
            "stage_boundaries": list(result.stage_boundaries),
            "opacity_mid_fractions": result.opacity_mid_fractions,
            "n_gaussians": len(result.gaussians),
        }, f, indent=1)
    manifest.finalize([ply_path, trace_path, metrics_path])
    print(f"trained {len(result.gaussians)} Gaussians, held-out PSNR "
          f"{result.heldout_psnr:.2f} dB -> {ply_path}")
    return 0


def _grad_map_png(grad_map: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(grad_map, axis=-1, keepdims=True)
    unit = np.where(norms > 1e-8, grad_map / np.maximum(norms, 1e-12), 0.0)
    return (unit + 1.0) / 2.0


def cmd_render(args) -> int:
    channels = [c.strip() for c in args.channels.split(",") if c.strip()]
    valid = {"color", "depth", "alpha", "grad_map"}
    if not channels or not set(channels) <= valid:
        print(f"error: channels must be a non-empty subset of {sorted(valid)}",
              file=sys.stderr)
        return 2
    gaussians = formats.load_gaussians(args.ply)
    scene = load_scene(args.scene_dir)
    indices = ([int(i) for i in args.cameras.split(",")] if args.cameras
               else list(scene.heldout_indices))
    for i in indices:
        if not 0 <= i < len(scene.cameras):
            print(f"error: camera index {i} out of range", file=sys.stderr)
            return 1
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out, "render", {
        "ply": str(args.ply), "scene_dir": str(args.scene_dir),
        "cameras": indices, "channels": channels, "grad_png": args.grad_png,
    })
    produced = []
    cfg = RenderConfig(background=scene.background)
    for i in indices:
        fb = render(gaussians, scene.cameras[i], cfg)
        base = out / f"cam_{i:03d}"
        if "color" in channels:
            path = base.with_name(base.name + "_color.png")
            formats.write_png(path, fb.to_image())
            produced.append(path)
            score = metrics.psnr(fb.to_image(), scene.images[i])
            print(f"camera {i}: PSNR {min(score, 100.0):.2f} dB")
        if "depth" in channels:
            path = base.with_name(base.name + "_depth.pfm")
            formats.write_pfm(path, fb.depth)
            produced.append(path)
        if "alpha" in channels:
            path = base.with_name(base.name + "_alpha.pfm")
            formats.write_pfm(path, fb.alpha)
            produced.append(path)
        if "grad_map" in channels:
            path = base.with_name(base.name + "_grad.pfm")
            formats.write_pfm(path, fb.grad_map)
            produced.append(path)
            if args.grad_png:
                path = base.with_name(base.name + "_grad.png")
                formats.write_png(path, _grad_map_png(fb.grad_map))
                produced.append(path)
    manifest.finalize(produced)
    return 0


def cmd_extract_mesh(args) -> int:
    gaussians = formats.load_gaussians(args.ply)
    scene = load_scene(args.scene_dir)
    out_base = Path(args.out_base)
    out_base.parent.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out_base.parent, "extract-mesh", {
        "ply": str(args.ply), "scene_dir": str(args.scene_dir),
        "res": args.res, "export_points": args.export_points,
        "points": args.points, "seed": args.seed,
    })
    cfg = RenderConfig(background=scene.background)
    renders = [(render(gaussians, scene.cameras[i], cfg), scene.cameras[i])
               for i in scene.train_indices]
    gaussians.recompute_bounds()
    center = gaussians.scene_bounds.mean(axis=0)
    half = (gaussians.scene_bounds[1] - gaussians.scene_bounds[0]) / 2.0
    bounds = np.stack([center - 1.05 * half, center + 1.05 * half])
    grid = sdf.build_sdf_grid(gaussians, renders, bounds, (args.res,) * 3)
    mesh = meshing.marching_cubes(grid)
    produced = []
    if len(mesh) == 0:
        print("warning: no zero crossings; writing empty mesh", file=sys.stderr)
    else:
        mesh = meshing.color_mesh(mesh, gaussians, [scene.cameras[i] for i in scene.train_indices],
                                  cfg)
    obj_path = out_base.with_suffix(".obj")
    ply_path = out_base.with_suffix(".ply")
    meshing.export_mesh_obj(mesh, obj_path)
    meshing.export_mesh_ply(mesh, ply_path)
    produced += [obj_path, ply_path]
    print(f"mesh: {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles")
    if args.export_points:
        cloud = sdf.sample_level_set(gaussians, renders, n=args.points, seed=args.seed)
        pts_path = out_base.with_name(out_base.stem + "_points.ply")
        meshing.export_oriented_points(cloud, pts_path)
        produced.append(pts_path)
        print(f"oriented points: {len(cloud)} -> {pts_path}")
    manifest.finalize(produced)
    return 0


def _normal_alignment(fb, normal_map) -> tuple[float, int]:
    mask = (np.linalg.norm(normal_map, axis=-1) > 1e-8) & (fb.alpha > 0.5)
    g = fb.grad_map[mask]
    n = normal_map[mask]
    gn = np.linalg.norm(g, axis=-1)
    ok = gn > 1e-8
    if not ok.any():
        return 0.0, 0
    cos = np.abs(np.sum(g[ok] * n[ok], axis=-1)) / (gn[ok] * np.linalg.norm(n[ok], axis=-1))
    return float(cos.mean()), int(ok.sum())


def _reference_surface_points(kind: str, n: int = 100_000) -> np.ndarray:
    i = np.arange(n)
    z = 1 - 2 * (i + 0.5) / n
    rho = np.sqrt(np.maximum(1 - z * z, 0.0))
    phi = np.pi * (3 - np.sqrt(5)) * i
    unit = np.stack([rho * np.cos(phi), z, rho * np.sin(phi)], axis=1)
    if kind in ("sphere", "textured-sphere"):
        return 0.5 * unit
    if kind == "two-spheres":
        from .scenes import _TWO_SPHERES

        areas = np.array([r**2 for _, r, _ in _TWO_SPHERES])
        counts = (n * areas / areas.sum()).astype(int)
        parts = []
        for (center, radius, _), m in zip(_TWO_SPHERES, counts):
            parts.append(center + radius * unit[:m])
        return np.concatenate(parts)
    raise ValueError(f"no analytic reference surface for kind {kind!r}")


def cmd_eval(args) -> int:
    gaussians = formats.load_gaussians(args.ply)
    scene = load_scene(args.scene_dir)
    cfg = RenderConfig(background=scene.background)
    report = {"per_camera": [], "cameras": list(scene.heldout_indices)}
    psnrs, ssims, aligns = [], [], []
    weights = LossWeights()
    loss_report = None
    for i in scene.heldout_indices:
        fb = render(gaussians, scene.cameras[i], cfg)
        img = fb.to_image()
        p = min(metrics.psnr(img, scene.images[i]), 100.0)
        s = metrics.ssim(img, scene.images[i])
        entry = {"camera": i, "psnr": p, "ssim": s}
        if scene.normal_maps is not None:
            cos, used = _normal_alignment(fb, scene.normal_maps[i])
            entry["normal_alignment"] = cos
            entry["alignment_pixels"] = used
            aligns.append(cos)
        if loss_report is None:
            l1_value, _ = l1_loss(fb.color, scene.images[i])
            ds_value, _ = dssim_loss(fb.color, scene.images[i])
            loss_report = {
                "l1": l1_value, "dssim": ds_value,
                "lambda_dssim": weights.lambda_dssim,
                "total": l1_value + weights.lambda_dssim * ds_value,
            }
        psnrs.append(p)
        ssims.append(s)
        report["per_camera"].append(entry)
    report["psnr"] = float(np.mean(psnrs))
    report["ssim"] = float(np.mean(ssims))
    if aligns:
        report["normal_alignment"] = float(np.mean(aligns))
    report["loss_report"] = loss_report
    if args.mesh:
        verts, tris, _, _ = formats.read_mesh_ply(args.mesh)
        mesh = meshing.TriangleMesh(vertices=verts, triangles=tris)
        kind = args.reference or scene.kind
        ref = _reference_surface_points(kind)
        report["chamfer_to_reference"] = meshing.chamfer_distance(mesh, ref)
        report["mesh_watertight"] = meshing.is_watertight(mesh)
        report["mesh_euler_characteristic"] = meshing.euler_characteristic(mesh)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out.parent, "eval", {
        "ply": str(args.ply), "scene_dir": str(args.scene_dir),
        "mesh": args.mesh, "reference": args.reference,
    })
    with open(out, "w") as f:
        json.dump(report, f, indent=1)
    manifest.finalize([out])
    print(f"PSNR {report['psnr']:.2f} dB  SSIM {report['ssim']:.4f}"
          + (f"  |cos| {report['normal_alignment']:.4f}" if aligns else ""))
    if "chamfer_to_reference" in report:
        print(f"chamfer vs {args.reference or scene.kind}: "
              f"{report['chamfer_to_reference']:.5f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatnorm", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--threads", type=int, default=None,
                        help="cap worker/BLAS thread count (env SPLATNORM_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-scene", help="synthesize a dataset with analytic ground truth")
    p.add_argument("out_dir")
    p.add_argument("--kind", required=True, choices=SCENE_KINDS)
    p.add_argument("--cameras", type=int, default=24)
    p.add_argument("--res", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_scene)

    p = sub.add_parser("train", help="optimize Gaussians on a scene")
    p.add_argument("scene_dir")
    p.add_argument("out_dir")
    p.add_argument("--lambda-r", type=float, default=0.2)
    p.add_argument("--reg-iters", type=int, default=6000, choices=[6000, 13000])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true", default=True)
    p.add_argument("--scale", type=float, default=1.0,
                   help="proportionally scale the stage schedule (0.1 -> 3000 iters)")
    p.add_argument("--stages", default=None,
                   help="explicit vanilla,opacity,regularized,total override")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render channels from a trained PLY")
    p.add_argument("ply")
    p.add_argument("scene_dir")
    p.add_argument("out_dir")
    p.add_argument("--cameras", default=None, help="comma-separated indices (default: held-out)")
    p.add_argument("--channels", default="color")
    p.add_argument("--grad-png", action="store_true",
                   help="also write grad_map as a (n+1)/2 normal-colored PNG")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("extract-mesh", help="SDF grid + marching cubes from a trained PLY")
    p.add_argument("ply")
    p.add_argument("scene_dir")
    p.add_argument("out_base", help="output path stem; writes .obj and .ply")
    p.add_argument("--res", type=int, default=128)
    p.add_argument("--export-points", action="store_true")
    p.add_argument("--points", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_extract_mesh)

    p = sub.add_parser("eval", help="held-out metrics and optional mesh quality")
    p.add_argument("ply")
    p.add_argument("scene_dir")
    p.add_argument("--mesh", default=None, help="mesh PLY to evaluate")
    p.add_argument("--reference", default=None,
                   help="analytic reference kind for Chamfer (default: scene kind)")
    p.add_argument("--report", default="report.json")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_thread_cap(args.threads)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError, formats.PlyFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
