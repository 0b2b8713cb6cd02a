"""Command line entry point: run, eval, render, gradcheck and bench."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics, Pose
from .metrics import attainable_region, evaluate
from .mission import Mission, MissionConfig, evaluation_fixture, initial_pose, rng_streams
from .planner import MODES, PlannerConfig
from .pnm import write_pgm, write_ppm
from .scene import load_scene, render_gt
from .splat_map import SplatMap, render
from .voxel_map import VoxelMap

BENCH_COLUMNS = ["mode", "seed", "status", "steps", "sim_time_s", "psnr_db", "completeness", "n_surfels", "explored_frac"]


def _seed_list(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        if ".." in part:
            lo, hi = part.split("..")
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("empty seed list")
    return out


def _mode_list(text: str) -> list[str]:
    modes = [m for m in text.split(",") if m]
    for m in modes:
        if m not in MODES:
            raise argparse.ArgumentTypeError(f"unknown mode {m!r}")
    return modes


def _positive(text: str) -> int:
    v = int(text)
    if v < 8:
        raise argparse.ArgumentTypeError("resolution must be at least 8")
    return v


def _non_negative(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return v


def _mission_config(args, mode=None, seed=None, out=None) -> MissionConfig:
    return MissionConfig(
        scene=args.scene,
        intr=CameraIntrinsics(resolution=(args.res, args.res)),
        planner=PlannerConfig(mode=mode or args.mode),
        seed=args.seed if seed is None else seed,
        max_steps=args.steps,
        max_sim_time_s=args.sim_time,
        eval_every=args.eval_every,
        n_test_views=args.test_views,
        out_dir=out if out is not None else args.out,
        dump_views=getattr(args, "dump_views", False),
        dump_voxels=getattr(args, "dump_voxels", None),
        measure_along_path=getattr(args, "measure_along_path", False),
    )


def _add_mission_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scene", default="builtin:room", help="scene JSON path or builtin:room")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=MODES, default="full")
    p.add_argument("--steps", type=_non_negative, default=40, help="mapping steps")
    p.add_argument("--sim-time", type=float, default=300.0, help="simulated time budget in seconds")
    p.add_argument("--res", type=_positive, default=64, help="square image resolution")
    p.add_argument("--eval-every", type=int, default=5)
    p.add_argument("--test-views", type=int, default=50)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="surfelnbv", description="Active surfel-map reconstruction simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one mission")
    _add_mission_flags(p)
    p.add_argument("--out", default="out")
    p.add_argument("--dump-views", action="store_true", help="write per-step channel images under OUT/views")
    p.add_argument("--dump-voxels", metavar="PATH", help="also write the final voxel dump to PATH")
    p.add_argument("--measure-along-path", action="store_true", help="capture frames at path waypoints")

    p = sub.add_parser("eval", help="metrics for a saved mission output directory")
    _add_mission_flags(p)
    p.add_argument("--out", default="out", help="mission output directory to evaluate")

    p = sub.add_parser("render", help="dump rendered channels of a saved map at a pose")
    p.add_argument("--map", required=True, help="surfels.txt")
    p.add_argument("--pose", nargs=5, type=float, required=True, metavar=("X", "Y", "Z", "YAW", "PITCH"))
    p.add_argument("--res", type=_positive, default=64)
    p.add_argument("--scene", help="also dump the noiseless ground-truth view of this scene")
    p.add_argument("--out", default="views")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--scenes", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("bench", help="multi-seed, multi-mode comparison")
    _add_mission_flags(p)
    p.add_argument("--modes", type=_mode_list, default=["full", "no_roi", "fbe"])
    p.add_argument("--seeds", type=_seed_list, default=[1, 2, 3, 4, 5], help="e.g. 1..5 or 1,3,7")
    p.add_argument("--out", default="bench")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    return parser


# ------------------------------------------------------------------ commands
def cmd_run(args) -> int:
    cfg = _mission_config(args)
    mission = Mission(cfg)
    status = mission.run()
    last = mission.state.samples[-1]
    print(f"steps={mission.state.step} sim_time={mission.state.sim_time_s:.1f}s psnr={last.psnr_mean:.2f}dB "
          f"completeness={last.completeness:.4f} explored={last.voxel_explored_fraction:.4f} surfels={last.surfel_count}")
    if status:
        print(mission.state.message, file=sys.stderr)
    return status


def cmd_eval(args) -> int:
    out = Path(args.out)
    cfg = _mission_config(args, out=None)
    scene = load_scene(cfg.scene)
    vmap = VoxelMap.for_bounds(scene.bounds_min, scene.bounds_max, cfg.voxel_size)
    test_poses, gt_rgbs, gt_surface = evaluation_fixture(scene, vmap, cfg, rng_streams(cfg.seed)["evaluation"])
    smap = SplatMap.load(out / "surfels.txt")
    poses = [Pose.from_array(r) for r in np.loadtxt(out / "poses.txt", ndmin=2)]
    if (out / "voxels.txt").exists():
        vmap.load_dump(out / "voxels.txt")
    attainable = attainable_region(scene, vmap, initial_pose(scene, vmap).position)
    s = evaluate(smap, poses, test_poses, gt_rgbs, gt_surface, cfg.intr, vmap, attainable, len(poses))
    print(f"psnr_db={s.psnr_mean:.4f} completeness={s.completeness:.5f} n_surfels={s.surfel_count} "
          f"explored_frac={s.voxel_explored_fraction:.5f}")
    return 0


def cmd_render(args) -> int:
    intr = CameraIntrinsics(resolution=(args.res, args.res))
    pose = Pose.from_array(args.pose)
    v = render(SplatMap.load(args.map), pose, intr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ppm(out / "rgb.ppm", v.rgb)
    write_pgm(out / "depth.pgm", v.depth, 0.0, intr.d_far)
    write_ppm(out / "normal.ppm", v.normal, -1.0, 1.0)
    write_pgm(out / "opacity.pgm", v.opacity)
    write_pgm(out / "conf.pgm", v.conf, 0.0, max(float(v.conf.max()), 1e-12))
    if args.scene:
        gt = render_gt(load_scene(args.scene), pose, intr, 0.0)
        write_ppm(out / "gt_rgb.ppm", gt.rgb)
        write_pgm(out / "gt_depth.pgm", gt.depth, 0.0, intr.d_far)
    print(f"wrote channel images to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.scenes, args.seed)
    for r in results:
        print(f"seed {r.seed:4d} {'PASS' if r.passed else 'FAIL'} checked={r.n_checked} skipped={r.n_skipped} "
              f"max_rel={r.max_rel_error:.2e}")
        for name, idx, an, fd in r.failures:
            print(f"    {name}{list(idx)} analytic={an:.6e} fd={fd:.6e}")
    n_fail = sum(not r.passed for r in results)
    print(f"{len(results) - n_fail}/{len(results)} scenes passed")
    return 0 if n_fail == 0 else 1


def _bench_one(job):
    cfg = job
    mission = Mission(cfg)
    status = mission.run()
    s = mission.state.samples[-1]
    return [cfg.planner.mode, cfg.seed, status, mission.state.step, mission.state.sim_time_s,
            s.psnr_mean, s.completeness, s.surfel_count, s.voxel_explored_fraction]


def bench(configs: list[MissionConfig], workers: int = 1) -> list[list]:
    if workers > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_bench_one, configs))
    return [_bench_one(c) for c in configs]


def summarize(rows: list[list]) -> list[list]:
    """Per-mode mean and (population) std rows appended after the runs."""
    out = []
    for mode in dict.fromkeys(r[0] for r in rows):
        sel = np.array([r[4:] for r in rows if r[0] == mode], dtype=float)
        out.append([mode, "mean", "", "", *sel.mean(axis=0).tolist()])
        out.append([mode, "std", "", "", *sel.std(axis=0).tolist()])
    return out


def cmd_bench(args) -> int:
    out = Path(args.out)
    configs = [
        _mission_config(args, mode=mode, seed=seed, out=out / f"{mode}_seed{seed}")
        for mode in args.modes for seed in args.seeds
    ]
    rows = bench(configs, args.workers)
    table = rows + summarize(rows)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        for r in table:
            w.writerow([f"{v:.10g}" if isinstance(v, float) and math.isfinite(v) else v for v in r])
    print(",".join(BENCH_COLUMNS))
    for r in table:
        print(",".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in r))
    return 0 if all(r[2] == 0 for r in rows) else 2


COMMANDS = {"run": cmd_run, "eval": cmd_eval, "render": cmd_render, "gradcheck": cmd_gradcheck, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
