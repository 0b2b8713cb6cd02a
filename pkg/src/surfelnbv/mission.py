"""Mapping/planning mission loop with simulated time, seeding and outputs."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics, Pose
from .confidence import K_THRESH, ObservationLog, low_confidence_rois, refresh_confidences, update_observations
from .metrics import MetricSample, attainable_region, evaluate
from .planner import PlannerConfig, PlanningError, plan
from .pnm import write_pgm, write_ppm
from .scene import GroundTruthScene, load_scene, render_gt, sample_surface_points, sample_test_viewpoints
from .splat_map import SplatMap, densify_mask, prune_invisible, render, spawn
from .train import Adam, TrainConfig, normal_from_depth, train_step
from .voxel_map import VoxelMap

log = logging.getLogger(__name__)

CSV_COLUMNS = [
    "step", "sim_time_s", "psnr_db", "completeness", "n_surfels", "explored_frac",
    "loss_c", "loss_d", "loss_n", "planner_mode", "winner_kind", "path_len_m",
    "n_candidates", "n_reachable", "n_roi_frontier", "n_roi_low_conf", "n_random",
    "winner_score", "winner_u_v", "winner_u_g",
] + [f"k_hist_{i:02d}" for i in range(20)] + ["k_max"]

RNG_STREAMS = ("sensor", "training", "planner", "spawn", "evaluation")


@dataclass
class MissionConfig:
    scene: str = "builtin:room"
    intr: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics(resolution=(64, 64)))
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    noise_slope: float = 0.01
    max_steps: int | None = 40
    max_sim_time_s: float | None = 300.0
    eval_every: int = 5
    robot_speed: float = 1.0
    mapping_time_s: float = 1.0
    planning_time_s: float = 0.5
    seed: int = 0
    out_dir: str | Path | None = None
    voxel_size: float = 0.2
    prune_every: int = 5
    w_min: float = 0.3
    k_thresh: float = K_THRESH
    densify_lambda: float = 0.05
    spawn_stride: int = 2
    max_new_surfels: int = 4096
    n_test_views: int = 50
    n_gt_surface: int = 20000
    dump_views: bool = False
    dump_voxels: str | Path | None = None
    measure_along_path: bool = False

    def __post_init__(self):
        if self.max_steps is None and self.max_sim_time_s is None:
            raise ValueError("a step or sim-time budget is required")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValueError("max_steps must be non-negative")
        if self.max_sim_time_s is not None and self.max_sim_time_s <= 0:
            raise ValueError("max_sim_time_s must be positive")
        if self.eval_every < 1 or self.robot_speed <= 0:
            raise ValueError("eval_every and robot_speed must be positive")
        if not str(self.scene).startswith("builtin:") and not Path(self.scene).is_file():
            raise FileNotFoundError(self.scene)


@dataclass
class MissionState:
    scene: GroundTruthScene
    smap: SplatMap
    vmap: VoxelMap
    pose: Pose
    poses: list = field(default_factory=list)
    frames: list = field(default_factory=list)
    obs: ObservationLog = field(default_factory=ObservationLog)
    optimizer: Adam | None = None
    sim_time_s: float = 0.0
    step: int = 0
    n_logged: int = 0
    explored_trace: list = field(default_factory=list)
    samples: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    status: int = 0
    message: str = ""


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
    return {name: np.random.default_rng(ss) for name, ss in zip(RNG_STREAMS, children)}


def initial_pose(scene: GroundTruthScene, vmap: VoxelMap) -> Pose:
    """Center of the ground-truth free voxel nearest the scene center."""
    free = np.argwhere(scene.free_voxel_mask(vmap.origin, vmap.voxel_size, vmap.dims))
    if not len(free):
        raise ValueError("scene has no free voxel")
    centers = vmap.center_of(free)
    mid = 0.5 * (scene.bounds_min + scene.bounds_max)
    best = int(np.argmin(np.linalg.norm(centers - mid, axis=1)))
    return Pose(centers[best], 0.0, 0.0)


def evaluation_fixture(scene: GroundTruthScene, vmap: VoxelMap, cfg: MissionConfig, rng: np.random.Generator):
    """Held-out test poses, their noiseless GT colors and GT surface samples."""
    n_test = cfg.n_test_views
    free_count = int(scene.free_voxel_mask(vmap.origin, vmap.voxel_size, vmap.dims).sum())
    poses = sample_test_viewpoints(scene, vmap, n_test, rng, replace=n_test > free_count)
    rgbs = [render_gt(scene, p, cfg.intr, 0.0).rgb for p in poses]
    surface = sample_surface_points(scene, cfg.n_gt_surface, rng)[0]
    return poses, rgbs, surface


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None or not math.isfinite(v):
        return "nan"
    return f"{float(v):.10g}"


class Mission:
    """One simulated exploration run; ``run`` returns the exit status."""

    def __init__(self, cfg: MissionConfig):
        self.cfg = cfg
        self.rng = rng_streams(cfg.seed)
        scene = load_scene(cfg.scene)
        vmap = VoxelMap.for_bounds(scene.bounds_min, scene.bounds_max, cfg.voxel_size)
        pose = initial_pose(scene, vmap)
        tc = cfg.train
        self.state = MissionState(scene, SplatMap(), vmap, pose, optimizer=Adam(tc.lr, tc.betas, tc.eps))
        self.test_poses, self.gt_rgbs, self.gt_surface = evaluation_fixture(scene, vmap, cfg, self.rng["evaluation"])
        self.attainable = attainable_region(scene, vmap, pose.position)
        self.conf_mode = "count_only" if cfg.planner.mode == "count_only" else "full"
        self.out = Path(cfg.out_dir) if cfg.out_dir is not None else None

    # ------------------------------------------------------------- phases
    def capture(self, pose: Pose):
        st = self.state
        frame = render_gt(st.scene, pose, self.cfg.intr, self.cfg.noise_slope, self.rng["sensor"], len(st.frames))
        st.poses.append(pose)
        st.frames.append(frame)
        valid = frame.depth > 0
        rays = self.cfg.intr.pixel_rays()[valid] @ pose.rotation.T
        st.vmap.integrate_point_cloud(pose.position, pose.position + frame.depth[valid][:, None] * rays)
        return frame

    def map_update(self, frame) -> list:
        cfg, st = self.cfg, self.state
        intr = cfg.intr
        rendered = render(st.smap, frame.pose, intr)
        mask = densify_mask(rendered, frame, cfg.densify_lambda)
        normals = normal_from_depth(frame.depth, intr)
        spawn(st.smap, frame, mask, normals, intr, self.rng["spawn"], cfg.spawn_stride, cfg.max_new_surfels, st.step)
        trace = train_step(st.smap, st.frames, cfg.train, self.rng["training"], intr, st.optimizer)
        if st.step % cfg.prune_every == 0 and len(st.smap):
            removed, remap = prune_invisible(st.smap, st.poses, intr, cfg.w_min)
            if removed:
                st.obs.remap(remap)
                st.optimizer.remap(remap)
        for j in range(st.n_logged, len(st.poses)):
            update_observations(st.obs, st.smap, j, st.poses[j], intr, cfg.w_min)
        st.n_logged = len(st.poses)
        refresh_confidences(st.smap, st.obs, st.poses, intr.d_far, self.conf_mode)
        return trace

    def evaluate(self) -> MetricSample:
        st = self.state
        sample = evaluate(st.smap, st.poses, self.test_poses, self.gt_rgbs, self.gt_surface, self.cfg.intr,
                          st.vmap, self.attainable, st.step, st.sim_time_s)
        st.samples.append(sample)
        return sample

    def record(self, sample: MetricSample, trace, diag) -> None:
        k = self.state.smap.k
        k_max = float(k.max()) if len(k) else 0.0
        hist = np.histogram(k, bins=20, range=(0.0, k_max if k_max > 0 else 1.0))[0] if len(k) else np.zeros(20, int)
        last = trace[-1] if trace else (math.nan,) * 4
        diag = diag or {}
        row = [
            sample.mission_step, sample.sim_time, sample.psnr_mean, sample.completeness, sample.surfel_count,
            sample.voxel_explored_fraction, last[1], last[2], last[3], self.cfg.planner.mode,
            diag.get("winner_kind", ""), diag.get("path_len_m", 0.0),
            diag.get("n_candidates", 0), diag.get("n_reachable", 0), diag.get("n_roi_frontier", 0),
            diag.get("n_roi_low_conf", 0), diag.get("n_random", 0), diag.get("winner_score", math.nan),
            diag.get("winner_u_v", math.nan), diag.get("winner_u_g", math.nan),
            *hist.tolist(), k_max,
        ]
        self.state.rows.append([_fmt(v) for v in row])

    def move(self, winner, diag) -> None:
        cfg, st = self.cfg, self.state
        st.sim_time_s += cfg.planning_time_s + diag["path_len_m"] / cfg.robot_speed
        if cfg.measure_along_path:
            for idx in winner.path[1:-1]:
                self.capture(Pose(st.vmap.center_of(idx), winner.pose.yaw, winner.pose.pitch))
        st.pose = winner.pose

    def dump_views(self) -> None:
        st = self.state
        d = self.out / "views"
        d.mkdir(parents=True, exist_ok=True)
        v = render(st.smap, st.pose, self.cfg.intr)
        n = st.step
        write_ppm(d / f"step_{n:03d}_rgb.ppm", v.rgb)
        write_pgm(d / f"step_{n:03d}_depth.pgm", v.depth, 0.0, self.cfg.intr.d_far)
        write_ppm(d / f"step_{n:03d}_normal.ppm", v.normal, -1.0, 1.0)
        write_pgm(d / f"step_{n:03d}_opacity.pgm", v.opacity)
        k = v.conf
        write_pgm(d / f"step_{n:03d}_conf.pgm", k, 0.0, max(float(k.max()), 1e-12))

    # ---------------------------------------------------------------- loop
    def budget_left(self) -> bool:
        cfg, st = self.cfg, self.state
        if cfg.max_steps is not None and st.step >= cfg.max_steps:
            return False
        if cfg.max_sim_time_s is not None and st.sim_time_s >= cfg.max_sim_time_s:
            return False
        return True

    def is_last(self) -> bool:
        cfg, st = self.cfg, self.state
        if cfg.max_steps is not None and st.step >= cfg.max_steps:
            return True
        return cfg.max_sim_time_s is not None and st.sim_time_s >= cfg.max_sim_time_s

    def run(self) -> int:
        cfg, st = self.cfg, self.state
        self.record(self.evaluate(), [], None)
        while self.budget_left():
            st.step += 1
            frame = self.capture(st.pose)
            trace = self.map_update(frame)
            st.sim_time_s += cfg.mapping_time_s
            st.explored_trace.append(st.vmap.explored_fraction(self.attainable))
            if cfg.dump_views and self.out is not None:
                self.dump_views()
            last = self.is_last()
            sample = self.evaluate() if (last or st.step % cfg.eval_every == 0) else None
            diag = None
            if not last:
                low = low_confidence_rois(st.smap, st.vmap, cfg.k_thresh, st.pose.position)
                try:
                    winner, diag = plan(st.pose, st.vmap, st.smap, low, cfg.intr, cfg.planner, self.rng["planner"])
                except PlanningError as exc:
                    st.status, st.message = 2, f"planning failed at step {st.step}: {exc}"
                    log.warning(st.message)
                    if sample is None:
                        sample = self.evaluate()
                    self.record(sample, trace, None)
                    break
                self.move(winner, diag)
            if sample is not None:
                self.record(sample, trace, diag)
            log.info("step %d t=%.1fs surfels=%d explored=%.3f", st.step, st.sim_time_s, len(st.smap),
                     st.explored_trace[-1])
        if self.out is not None:
            self.write_outputs()
        return st.status

    def write_outputs(self) -> None:
        st = self.state
        self.out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(self.out / "metrics.csv", st.rows)
        st.smap.save(self.out / "surfels.txt")
        st.vmap.dump(self.out / "voxels.txt")
        if self.cfg.dump_voxels:
            st.vmap.dump(self.cfg.dump_voxels)
        np.savetxt(self.out / "poses.txt", np.array([p.as_array() for p in st.poses]).reshape(-1, 5),
                   fmt="%.9g", header="x y z yaw pitch")


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        w.writerows(rows)


def run(cfg: MissionConfig) -> tuple[int, Mission]:
    m = Mission(cfg)
    return m.run(), m
