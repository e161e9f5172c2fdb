"""Command-line entry point wiring all workflows.

Exit codes: 0 success, 1 argument/validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import evalmesh, rendering, scenes, trainer


class CliError(Exception):
    pass


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, required=True,
                   help="output directory (or file for mesh export)")


def build_parser():
    parser = argparse.ArgumentParser(prog="roomsdf")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-scene", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--preset", default="room-thin",
                   choices=sorted(scenes.SCENE_PRESETS))
    p.add_argument("--views", type=int, default=24)
    p.add_argument("--test-views", type=int, default=2)
    p.add_argument("--res", type=int, default=96)
    p.add_argument("--flat-rot-deg", type=float, default=0.0)
    p.add_argument("--complex-noise-deg", type=float, default=0.0)
    p.add_argument("--depth-scale", type=float, default=1.0)
    p.add_argument("--depth-shift", type=float, default=0.0)
    p.add_argument("--invalid-fraction", type=float, default=0.0)
    p.add_argument("--gt-mesh-res", type=int, default=256)

    p = sub.add_parser("train", help="optimize a model on a dataset")
    _add_common(p)
    p.add_argument("--dataset", type=str, required=True)
    p.add_argument("--config", type=str, default=None,
                   help="JSON config file; flags override file values")
    p.add_argument("--preset", default="desk", choices=["desk", "paper"])
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--rays", type=int, default=None)
    p.add_argument("--ablation", default="full",
                   choices=["base", "modelA", "modelB", "modelC", "full"])

    p = sub.add_parser("extract-mesh", help="marching cubes of a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--dataset", type=str, required=True)
    p.add_argument("--res", type=int, default=128)

    p = sub.add_parser("eval", help="metrics for a checkpoint vs the GT mesh")
    _add_common(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--dataset", type=str, required=True)
    p.add_argument("--mesh-res", type=int, default=128)
    p.add_argument("--threshold", type=float, default=0.02)
    p.add_argument("--samples", type=int, default=100000)

    p = sub.add_parser("dump-angle-maps",
                       help="PGM heatmaps + threshold masks from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--dataset", type=str, required=True)

    p = sub.add_parser("bias-lab",
                       help="near-miss density/weight CSV (plain vs unbiased)")
    _add_common(p)
    p.add_argument("--offset", type=float, default=0.02,
                   help="gap between the ray and the cylinder surface")
    p.add_argument("--beta", type=float, default=0.01)
    p.add_argument("--cyl-radius", type=float, default=0.05)
    p.add_argument("--floor-t", type=float, default=1.0)
    p.add_argument("--samples", type=int, default=4096)

    p = sub.add_parser("robustness-sweep",
                       help="flat-prior rotation sweep: full model vs base")
    _add_common(p)
    p.add_argument("--angles", type=float, nargs="+", default=[0.0, 60.0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--views", type=int, default=24)
    p.add_argument("--res", type=int, default=96)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--configs", nargs="+", default=["full", "base"],
                   choices=["full", "base", "modelA", "modelB", "modelC"])
    return parser


ABLATIONS = {
    "base": dict(use_deflection=False, use_adaptive=False,
                 use_guided_opt=False, use_guided_unbias=False),
    "modelA": dict(use_deflection=True, use_adaptive=False,
                   use_guided_opt=False, use_guided_unbias=False),
    "modelB": dict(use_deflection=True, use_adaptive=True,
                   use_guided_opt=False, use_guided_unbias=False),
    "modelC": dict(use_deflection=True, use_adaptive=True,
                   use_guided_opt=True, use_guided_unbias=False),
    "full": dict(use_deflection=True, use_adaptive=True,
                 use_guided_opt=True, use_guided_unbias=True),
}


def cmd_make_scene(args):
    corruption = scenes.PriorCorruption(
        flat_rotation_deg=args.flat_rot_deg,
        complex_noise_deg=args.complex_noise_deg,
        depth_scale=args.depth_scale,
        depth_shift=args.depth_shift,
        invalid_fraction=args.invalid_fraction)
    path = scenes.make_dataset(
        args.out, preset=args.preset, n_views=args.views,
        n_test=args.test_views, width=args.res, height=args.res,
        seed=args.seed, corruption=corruption,
        gt_mesh_resolution=args.gt_mesh_res)
    print(f"dataset written to {path}")
    return 0


def _config_from_args(args):
    if args.config:
        with open(args.config) as f:
            cfg = trainer.RunConfig.from_json(json.load(f))
    elif args.preset == "paper":
        cfg = trainer.paper_config()
    else:
        cfg = trainer.desk_config()
    overrides = dict(ABLATIONS[args.ablation])
    overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["total_steps"] = args.steps
    if args.rays is not None:
        overrides["rays_per_step"] = args.rays
    overrides["dataset"] = args.dataset
    from dataclasses import replace
    return replace(cfg, **overrides).validate()


def cmd_train(args):
    cfg = _config_from_args(args)
    dataset = scenes.load_dataset(args.dataset)
    state, final = trainer.train(cfg, dataset, args.out)
    print(f"finished {cfg.total_steps} steps; checkpoint: {final}")
    return 0


def cmd_extract_mesh(args):
    dataset = scenes.load_dataset(args.dataset)
    state = trainer.load_checkpoint(args.checkpoint, dataset)
    mesh = trainer.extract_state_mesh(state, args.res)
    out = Path(args.out)
    if out.suffix != ".ply":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "mesh.ply"
    evalmesh.write_ply(out, mesh.vertices, mesh.triangles, mesh.normals)
    print(f"mesh with {mesh.n_vertices} vertices written to {out}")
    return 0


def cmd_eval(args):
    dataset = scenes.load_dataset(args.dataset)
    state = trainer.load_checkpoint(args.checkpoint, dataset)
    gt_path = Path(args.dataset) / "gt_mesh.ply"
    metrics, _ = trainer.evaluate_checkpoint(
        state, dataset, gt_mesh_path=gt_path if gt_path.exists() else None,
        mesh_resolution=args.mesh_res, threshold=args.threshold,
        n_samples=args.samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evalmesh.write_metrics_json(out / "metrics.json", metrics)
    print(json.dumps(metrics, indent=1, sort_keys=True))
    return 0


def cmd_dump_angle_maps(args):
    dataset = scenes.load_dataset(args.dataset)
    state = trainer.load_checkpoint(args.checkpoint, dataset)
    written = trainer.dump_angle_maps(state.angle_map, args.out)
    print(f"wrote {len(written)} PGM files to {args.out}")
    return 0


def near_miss_profile(offset=0.02, beta=0.01, cyl_radius=0.05, floor_t=1.0,
                      n_samples=4096):
    """Densities and rendering weights along a ray grazing a thin cylinder
    before hitting the floor; the canonical bias scenario."""
    # ray along +x at height z; floor plane z = z_floor hit at t = floor_t
    drop = 0.35
    dir_ = np.array([1.0, 0.0, -drop])
    dir_ = dir_ / np.linalg.norm(dir_)
    origin = np.array([0.0, 0.0, 0.0])
    z_floor = floor_t * dir_[2]
    # vertical cylinder placed so the closest approach equals radius + offset
    x_cyl = 0.45 * dir_[0] * floor_t
    y_cyl = cyl_radius + offset

    def sdf_and_normal(pts):
        d_cyl = np.hypot(pts[:, 0] - x_cyl, pts[:, 1] - y_cyl) - cyl_radius
        d_floor = pts[:, 2] - z_floor
        sdf = np.minimum(d_cyl, d_floor)
        n = np.zeros_like(pts)
        use_cyl = d_cyl < d_floor
        denom = np.hypot(pts[:, 0] - x_cyl, pts[:, 1] - y_cyl)
        denom = np.where(denom < 1e-12, 1.0, denom)
        n[use_cyl, 0] = ((pts[:, 0] - x_cyl) / denom)[use_cyl]
        n[use_cyl, 1] = ((pts[:, 1] - y_cyl) / denom)[use_cyl]
        n[~use_cyl, 2] = 1.0
        return sdf, n

    t = np.linspace(1e-4, floor_t * 1.18, n_samples)
    pts = origin[None] + t[:, None] * dir_[None]
    sdf, normal = sdf_and_normal(pts)
    f_prime = np.einsum("ij,j->i", normal, dir_)
    sigma_plain = rendering.laplace_density(sdf, beta)
    sigma_unbiased = rendering.unbiased_density(sdf, f_prime, beta)
    res_plain = rendering.composite_ray(t[None], np.array([0.0]),
                                        sigma_plain[None])
    res_unb = rendering.composite_ray(t[None], np.array([0.0]),
                                      sigma_unbiased[None])
    return {
        "t": t, "sdf": sdf,
        "sigma_plain": ad.value_of(sigma_plain),
        "sigma_unbiased": ad.value_of(sigma_unbiased),
        "weight_plain": ad.value_of(res_plain.weights)[0],
        "weight_unbiased": ad.value_of(res_unb.weights)[0],
        "floor_t": floor_t,
    }


def cmd_bias_lab(args):
    prof = near_miss_profile(offset=args.offset, beta=args.beta,
                             cyl_radius=args.cyl_radius,
                             floor_t=args.floor_t, n_samples=args.samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "bias_lab.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "sdf", "sigma_plain", "sigma_unbiased",
                         "weight_plain", "weight_unbiased"])
        for i in range(prof["t"].size):
            writer.writerow([f"{prof[k][i]:.10g}" for k in
                             ("t", "sdf", "sigma_plain", "sigma_unbiased",
                              "weight_plain", "weight_unbiased")])
    print(f"wrote {csv_path}")
    return 0


def run_robustness_sweep(out_dir, angles, seeds, configs, views=24, res=96,
                         steps=None, progress_cb=None):
    """Train each (config, angle, seed) and tabulate F-scores and drops."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = {}
    for angle in angles:
        data_dir = out_dir / f"data_rot{int(angle):02d}"
        if not (data_dir / "cameras.json").exists():
            scenes.make_dataset(
                data_dir, n_views=views, width=res, height=res, seed=0,
                corruption=scenes.PriorCorruption(flat_rotation_deg=angle))
        dataset = scenes.load_dataset(data_dir)
        for config_name in configs:
            for seed in seeds:
                cfg = trainer.desk_config(seed=seed,
                                          **ABLATIONS[config_name])
                if steps:
                    cfg = trainer.RunConfig.from_json(
                        {**cfg.to_json(), "total_steps": steps})
                run_dir = out_dir / f"{config_name}_rot{int(angle):02d}_s{seed}"
                state, _ = trainer.train(cfg, dataset, run_dir,
                                         progress_cb=progress_cb)
                metrics, _ = trainer.evaluate_checkpoint(
                    state, dataset, gt_mesh_path=data_dir / "gt_mesh.ply")
                results[(config_name, angle, seed)] = metrics
    table = {}
    for config_name in configs:
        per_angle = {}
        for angle in angles:
            scores = [results[(config_name, angle, s)].get("fscore", 0.0)
                      for s in seeds]
            per_angle[angle] = float(np.median(scores))
        drop = per_angle[angles[0]] - per_angle[angles[-1]]
        table[config_name] = {"fscore": per_angle, "drop": drop}
    with open(out_dir / "sweep.json", "w") as f:
        json.dump({"results": {f"{k[0]}_rot{k[1]}_s{k[2]}": v
                               for k, v in results.items()},
                   "table": {k: {"fscore": {str(a): s for a, s in
                                            v["fscore"].items()},
                                 "drop": v["drop"]} for k, v in table.items()}},
                  f, indent=1, sort_keys=True)
    return table


def cmd_robustness_sweep(args):
    table = run_robustness_sweep(args.out, args.angles, args.seeds,
                                 args.configs, views=args.views, res=args.res,
                                 steps=args.steps)
    header = ["config"] + [f"{a:g}deg" for a in args.angles] + ["drop"]
    print("\t".join(header))
    for name, row in table.items():
        cells = [name] + [f"{row['fscore'][a]:.4f}" for a in args.angles]
        cells.append(f"{row['drop']:+.4f}")
        print("\t".join(cells))
    return 0


COMMANDS = {
    "make-scene": cmd_make_scene,
    "train": cmd_train,
    "extract-mesh": cmd_extract_mesh,
    "eval": cmd_eval,
    "dump-angle-maps": cmd_dump_angle_maps,
    "bias-lab": cmd_bias_lab,
    "robustness-sweep": cmd_robustness_sweep,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return COMMANDS[args.command](args)
    except (CliError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
