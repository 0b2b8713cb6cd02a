import math

import numpy as np
import pytest
from scipy import stats
from scipy.sparse import csgraph, lil_matrix

from oracles import dijkstra_length, nbv_scores, facing_surfel
from surfelnbv.camera import CameraIntrinsics, Pose
from surfelnbv.planner import (CandidateViewpoint, ConeConfig, PlannerConfig, PlanningError, astar, hop_distances,
                               plan, sample_cone, sample_random, sample_roi, scores, select, utility)
from surfelnbv.splat_map import SplatMap
from surfelnbv.voxel_map import RoiVoxel, VoxelMap


def free_map(dims=(10, 10, 4), vs=0.2, frac=1.0, rng=None):
    vm = VoxelMap([0, 0, 0], vs, dims)
    vm.observed[:] = True
    vm.log_odds[:] = -1.0
    if rng is not None:
        vm.log_odds[rng.random(dims) > frac] = 2.0
    return vm


def test_sample_random_tiny_range_stays_put(rng):
    vm = free_map()
    cur = Pose(vm.center_of((4, 4, 2)), 0.0, 0.0)
    cands = sample_random(cur, vm, 30, PlannerConfig(random_range=0.1), rng)
    assert len(cands) == 30
    for c in cands:
        np.testing.assert_allclose(c.pose.position, cur.position)
        assert c.origin_kind == "random" and abs(c.pose.pitch) <= math.radians(45)
    assert len({round(c.pose.yaw, 9) for c in cands}) == 30


def test_sample_random_on_free_centers_and_uniform(rng):
    vm = free_map(frac=0.7, rng=rng)
    free = vm.free_mask()
    cur = Pose(vm.center_of((5, 5, 2)))
    cands = sample_random(cur, vm, 10_000, PlannerConfig(random_range=0.5), rng)
    idx = [c.voxel for c in cands]
    assert all(free[i] for i in idx)
    for c in cands[:100]:
        np.testing.assert_allclose(c.pose.position, vm.center_of(c.voxel))
    pool = [tuple(i) for i in np.argwhere(free) if np.linalg.norm(vm.center_of(i) - cur.position) <= 0.5 + 1e-9]
    assert set(idx) <= set(pool)
    counts = np.array([idx.count(p) for p in pool])
    assert stats.chisquare(counts).pvalue > 0.01


def test_sample_random_fallback_and_errors(rng):
    vm = free_map((6, 6, 1))
    vm.log_odds[:] = 2.0
    vm.log_odds[5, 5, 0] = vm.log_odds[5, 4, 0] = -1.0
    cands = sample_random(Pose(vm.center_of((0, 0, 0))), vm, 5, PlannerConfig(random_range=0.3), rng)
    assert {c.voxel for c in cands} <= {(5, 5, 0), (5, 4, 0)}
    vm.log_odds[:] = 2.0
    with pytest.raises(PlanningError):
        sample_random(Pose(vm.center_of((0, 0, 0))), vm, 5, PlannerConfig(), rng)


def test_cone_membership(rng):
    cone = ConeConfig()
    c, n = np.array([1.0, 2.0, 0.5]), np.array([0.0, 0.0, 1.0])
    pts = sample_cone(c, n, cone, 2000, rng)
    d = np.linalg.norm(pts - c, axis=1)
    assert d.min() >= cone.d_min - 1e-12 and d.max() <= cone.d_max + 1e-12
    ang = np.degrees(np.arccos(np.clip((pts - c) @ n / d, -1, 1)))
    assert ang.max() <= cone.max_angle_deg + 1e-9
    # volume-uniform: radius CDF follows r^3
    u = (d**3 - cone.d_min**3) / (cone.d_max**3 - cone.d_min**3)
    assert stats.kstest(u, "uniform").pvalue > 0.01


def test_sample_roi_membership_and_look_at(rng):
    vm = free_map((30, 30, 20), 0.2)
    cfg = PlannerConfig(n_roi_max=30)
    c = vm.center_of((15, 15, 2))
    roi = RoiVoxel(c, np.array([0.0, 0.0, 1.0]), "frontier", 0.0, (15, 15, 2))
    assert sample_roi([], vm, cfg, rng) == []
    cands = sample_roi([roi] * 20, vm, cfg, rng)
    assert 0 < len(cands) <= 30
    assert len({cd.voxel for cd in cands}) == len(cands)
    slack = math.sqrt(3) / 2 * vm.voxel_size
    for cd in cands:
        p = cd.pose.position
        d = np.linalg.norm(p - c)
        assert cfg.cone.d_min - slack <= d <= cfg.cone.d_max + slack
        ang = math.degrees(math.acos((p - c)[2] / d))
        assert ang <= cfg.cone.max_angle_deg + math.degrees(math.asin(min(1.0, slack / d)))
        assert math.degrees(math.acos(np.clip(cd.pose.forward @ (c - p) / d, -1, 1))) <= 0.5
        assert cd.origin_kind == "roi_frontier"


def test_utility_examples():
    intr = CameraIntrinsics(resolution=(16, 16))
    vm = free_map((10, 10, 10), 0.2)
    m = facing_surfel([1.0, 1.0, 1.5], [-1, 0, 0], s=(0.5, 0.5), o=0.9, k=0.7)
    cand = CandidateViewpoint(Pose([0.1, 1.0, 1.5]), "random", (0, 5, 7))
    u = utility(cand, vm, m, intr, PlannerConfig())
    assert cand.u_v == 0.0
    assert u == pytest.approx(cand.u_g) and cand.u_g < 0
    full = facing_surfel([1.0, 1.0, 1.5], [-1, 0, 0], s=(0.5, 0.5), o=1 - 1e-12, k=0.7)
    # constant confidence: a surfel so large it covers every pixel
    full.s[:] = 50.0
    u = utility(cand, vm, full, intr, PlannerConfig())
    assert u == pytest.approx(-0.7, rel=1e-4)


def test_utility_exploration_ratio():
    """50 of 1000 voxels unexplored and visible, empty map, phi 1000 -> 50."""
    intr = CameraIntrinsics(resolution=(16, 16))
    vm = VoxelMap([0, -1, -1], 0.2, (10, 10, 10))
    vm.observed[:] = True
    pose = Pose([-0.5, 0.0, 0.0], 0.0, 0.0)
    cam = pose.world_to_camera(vm.center_of(np.argwhere(vm.observed)))
    cand_idx = np.argwhere(vm.observed)[(cam[:, 2] > 0.3) & (np.abs(cam[:, 0]) < 0.3 * cam[:, 2])
                                        & (np.abs(cam[:, 1]) < 0.3 * cam[:, 2])]
    for i in cand_idx[:50]:
        vm.observed[tuple(i)] = False
    assert vm.unknown_mask().sum() == 50
    cand = CandidateViewpoint(pose, "random", (5, 5, 5))
    assert utility(cand, vm, SplatMap(), intr, PlannerConfig(phi=1000.0)) == pytest.approx(50.0, abs=1e-12)
    assert utility(cand, vm, SplatMap(), intr, PlannerConfig(phi=1000.0, mode="fbe")) == pytest.approx(50.0)


def test_astar_examples():
    grid = np.ones((5, 5, 1), bool)
    assert astar(grid, (2, 2, 0), (2, 2, 0))[1] == 0.0
    path, length = astar(grid, (0, 0, 0), (4, 0, 0), 0.2)
    assert length == pytest.approx(0.8) and path[0] == (0, 0, 0) and path[-1] == (4, 0, 0)
    grid[2, :, 0] = False
    assert astar(grid, (0, 0, 0), (4, 0, 0)) is None
    with pytest.raises(ValueError):
        astar(grid, (2, 0, 0), (4, 0, 0))


def _csgraph_lengths(passable, start, vs):
    idx = -np.ones(passable.shape, int)
    cells = np.argwhere(passable)
    idx[tuple(cells.T)] = np.arange(len(cells))
    g = lil_matrix((len(cells), len(cells)))
    for a, cell in enumerate(cells):
        for ax in range(3):
            nb = cell.copy()
            nb[ax] += 1
            if nb[ax] < passable.shape[ax] and passable[tuple(nb)]:
                g[a, idx[tuple(nb)]] = vs
    dist = csgraph.dijkstra(g.tocsr(), directed=False, indices=idx[start])
    return idx, dist


def test_astar_equals_dijkstra_on_random_grids(rng):
    for _ in range(100):
        passable = rng.random((10, 10, 4)) > 0.3
        cells = np.argwhere(passable)
        s, g = map(tuple, cells[rng.choice(len(cells), 2, replace=False)])
        found = astar(passable, s, g, 0.2)
        idx, dist = _csgraph_lengths(passable, s, 0.2)
        want = dist[idx[g]]
        assert dijkstra_length(passable, s, g, 0.2) == (None if np.isinf(want) else pytest.approx(want))
        if np.isinf(want):
            assert found is None
            continue
        path, length = found
        assert length == pytest.approx(want, abs=1e-12)
        assert all(passable[p] for p in path)
        assert all(sum(abs(a - b) for a, b in zip(p, q)) == 1 for p, q in zip(path, path[1:]))
        hops = hop_distances(passable, s)
        assert hops[g] * 0.2 == pytest.approx(want, abs=1e-12)


def test_astar_triangle_inequality(rng):
    passable = rng.random((10, 10, 4)) > 0.25
    cells = [tuple(c) for c in np.argwhere(passable)]
    for _ in range(50):
        a, b, c = (cells[i] for i in rng.choice(len(cells), 3, replace=False))
        ab, bc, ac = astar(passable, a, b), astar(passable, b, c), astar(passable, a, c)
        if ab and bc:
            assert ac is not None and ac[1] <= ab[1] + bc[1] + 1e-12


def test_select_examples():
    cfg = PlannerConfig(delta=0.5)
    np.testing.assert_allclose(scores([3, 1], [1, 1], 0.5), [0.5, 0.0])
    cands = [CandidateViewpoint(Pose(), "random", (0, 0, 0), utility=u, path_length=l) for u, l in ((3, 1), (1, 1))]
    assert select(cands, cfg) is cands[0]
    np.testing.assert_allclose(scores([1, 5, 2], [0, 0, 0], 0.5), [1 / 8, 5 / 8, 2 / 8])
    np.testing.assert_allclose(scores([-1, -3], [1, 1], 0.5), [2 / 2 - 0.25, 0 - 0.25])
    np.testing.assert_allclose(scores([0, 0], [1, 3], 0.5), [-0.125, -0.375])
    tie = [CandidateViewpoint(Pose(), "random", (0, 0, 0), utility=1.0, path_length=1.0) for _ in range(3)]
    assert select(tie, cfg) is tie[0]
    with pytest.raises(PlanningError):
        select([], cfg)


def test_select_equals_exhaustive_recomputation(rng):
    for _ in range(100):
        n = int(rng.integers(1, 30))
        u = rng.normal(size=n) * rng.choice([0.01, 1.0, 100.0])
        if rng.random() < 0.2:
            u = -np.abs(u)
        lengths = rng.choice([0.0, 0.2, 0.4, 1.0, 2.6], size=n)
        if rng.random() < 0.1:
            lengths[:] = 0.0
        cands = [CandidateViewpoint(Pose(), "random", (0, 0, 0), utility=float(a), path_length=float(b))
                 for a, b in zip(u, lengths)]
        ref = nbv_scores(u.tolist(), lengths.tolist(), 0.5)
        best = max(range(n), key=lambda i: (ref[i], -i))
        assert select(cands, PlannerConfig()) is cands[best]
        np.testing.assert_allclose(scores(u, lengths, 0.5), ref, atol=1e-12)


def test_select_scale_invariance(rng):
    for _ in range(50):
        u, lengths = rng.uniform(0.1, 5, 8), rng.uniform(0.1, 3, 8)
        base = int(np.argmax(scores(u, lengths, 0.5)))
        a, b = rng.uniform(0.1, 10, 2)
        assert int(np.argmax(scores(a * u, b * lengths, 0.5))) == base


def _planning_world():
    vm = free_map((20, 20, 10), 0.2)
    vm.observed[12:] = False  # unknown half gives frontiers
    intr = CameraIntrinsics(resolution=(16, 16))
    return vm, intr, Pose(vm.center_of((5, 10, 5)))


@pytest.mark.parametrize("mode", ["full", "no_roi", "fbe", "count_only"])
def test_plan_contract(mode):
    vm, intr, cur = _planning_world()
    cfg = PlannerConfig(mode=mode, n_total=40, n_roi_max=15)
    winner, diag = plan(cur, vm, SplatMap(), [], intr, cfg, np.random.default_rng(3))
    if mode == "no_roi":
        assert diag["n_roi_frontier"] == 0 and diag["n_roi_low_conf"] == 0 and diag["n_random"] == 40
    else:
        assert diag["n_roi_frontier"] > 0
    assert diag["n_candidates"] == 40
    assert vm.free_mask()[winner.voxel]
    assert all(vm.free_mask()[p] for p in winner.path[1:])
    assert winner.path[0] == tuple(vm.index_of(cur.position)) and winner.path[-1] == winner.voxel
    cands = diag["candidates"]
    ref = nbv_scores([c.utility for c in cands], [c.path_length for c in cands], cfg.delta)
    assert diag["winner_score"] == pytest.approx(max(ref), abs=1e-12)
    assert diag["winner_score"] >= max(ref) - 1e-12


def test_plan_starvation():
    vm, intr, cur = _planning_world()
    vm.log_odds[:] = 2.0  # everything occupied
    with pytest.raises(PlanningError):
        plan(cur, vm, SplatMap(), [], intr, PlannerConfig(), np.random.default_rng(0))


def test_planner_config_validation():
    assert PlannerConfig(mode="count_only_confidence").mode == "count_only"
    with pytest.raises(ValueError):
        PlannerConfig(mode="nbv")
    with pytest.raises(ValueError):
        PlannerConfig(n_total=10, n_roi_max=20)
    with pytest.raises(ValueError):
        PlannerConfig(cone=ConeConfig(d_min=2.0, d_max=1.0))
