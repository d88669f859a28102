import numpy as np
import pytest

from lidar_sfm.geom import RigidTransform, so3_exp
from lidar_sfm.harness import generate
from lidar_sfm.relmotion import MotionEdge
from lidar_sfm.validation import (
    FREE,
    OCCUPIED,
    UNKNOWN,
    OccupancyGrid,
    ValidationConfig,
    baseline_checks,
    build_grid,
    build_grids,
    confusion_report,
    consistency_ratio,
    enumerate_triplets,
    grid_check,
    label_outliers,
    success_rate_filter,
    triplet_checks,
    validate_edges,
)


def row_grids():
    """Ten occupied source cells in a row; the target confirms 2..8, frees 9, leaves 0 and 1 unknown."""
    states = np.full((10, 1, 1), UNKNOWN, dtype=np.int8)
    source = OccupancyGrid(1.0, np.zeros(3), np.full((10, 1, 1), OCCUPIED, dtype=np.int8))
    states[2:9] = OCCUPIED
    states[9] = FREE
    return source, OccupancyGrid(1.0, np.zeros(3), states)


def test_ratio_counts_only_known_cells():
    source, target = row_grids()
    assert consistency_ratio(source, target, RigidTransform()) == 7 / 8


def test_ratio_identity_and_shift_into_free_space():
    pts = np.column_stack([np.linspace(-2, 2, 200), np.full(200, 5.0), np.zeros(200)])
    g = build_grid(pts, 0.5, 20.0)
    assert consistency_ratio(g, g, RigidTransform()) == 1.0
    # ten voxels toward the sensor lands every cell in carved space
    assert consistency_ratio(g, g, RigidTransform(np.eye(3), [0, -5.0, 0])) == 0.0


def test_ratio_without_known_overlap_is_one():
    source, target = row_grids()
    assert consistency_ratio(source, target, RigidTransform(np.eye(3), [100.0, 0, 0])) == 1.0


def test_voxel_mismatch_rejected():
    source, target = row_grids()
    target.voxel = 0.5
    with pytest.raises(ValueError):
        consistency_ratio(source, target, RigidTransform())


def test_single_ray_grid():
    g = build_grid(np.array([[1.0, 0.0, 0.0]]), 0.5, 20.0, sensor_origin=(0.0, 0.0, 0.0))
    assert g.state_at([[1.1, 0.1, 0.1]])[0] == OCCUPIED
    assert g.state_at([[0.25, 0.1, 0.1]])[0] == FREE
    assert g.state_at([[0.25, 0.1, 0.1]] + np.array([[0, 0.6, 0]]))[0] == UNKNOWN
    counts = g.counts()
    assert counts["occupied"] == 1 and counts["free"] == 2


def test_plane_shell():
    # a wall at y = 4: in front free, behind unknown
    x, z = np.meshgrid(np.linspace(-3, 3, 121), np.linspace(-1, 1, 41))
    pts = np.column_stack([x.ravel(), np.full(x.size, 4.0), z.ravel()])
    g = build_grid(pts, 0.2, 20.0, carve_margin=0.6)
    assert g.state_at([[0.1, 4.05, 0.1]])[0] == OCCUPIED
    assert g.state_at([[0.1, 2.0, 0.1]])[0] == FREE
    assert g.state_at([[0.1, 5.0, 0.1]])[0] == UNKNOWN
    # the carve margin leaves the cells just in front of the wall unknown
    assert g.state_at([[0.1, 3.7, 0.1]])[0] == UNKNOWN


def test_max_range_drops_far_points():
    pts = np.array([[1.0, 0, 0], [30.0, 0, 0]])
    g = build_grid(pts, 0.5, 20.0)
    assert g.counts()["occupied"] == 1
    with pytest.raises(ValueError):
        build_grid(np.array([[30.0, 0, 0]]), 0.5, 20.0)


@pytest.fixture(scope="module")
def ambiguous_scene():
    sc = generate(dict(n_stations=10, ambiguity_fraction=0.2), 3)
    return sc, build_grids(sc.clouds, 0.2, 20.0, 0.6)


def test_grid_check_separates_true_and_twin_edges(ambiguous_scene):
    sc, grids = ambiguous_scene
    for a, b in sc.window_pairs:
        e = MotionEdge(a, b, sc.poses[a].inverse() @ sc.poses[b], "i-j-k-l", 50)
        ok, ratios = grid_check(e, grids[a], grids[b], sc.extrinsic)
        assert ok
        if (b - a) % sc.config.n_stations in (1, sc.config.n_stations - 1):
            assert min(ratios) >= 0.85
    assert sc.twin_transforms
    for (a, b), F in sc.twin_transforms.items():
        ok, ratios = grid_check(MotionEdge(a, b, F, "i-j-k-l", 50), grids[a], grids[b], sc.extrinsic)
        assert not ok and min(ratios) < 0.6


def test_missing_grid_passes(ambiguous_scene):
    sc, grids = ambiguous_scene
    ok, ratios = grid_check(MotionEdge(0, 1, RigidTransform(), "i-j-k-l", 5), None, grids[1], sc.extrinsic)
    assert ok and ratios == (None, None)


# triplets


def chain_edges(poses, pairs):
    return [MotionEdge(i, j, poses[i].inverse() @ poses[j], "i-j-k-l", 30) for i, j in pairs]


def square_poses():
    return {k: RigidTransform(so3_exp([0, 0, 0.3 * k]), [k, 0.5 * k * k, 0.1]) for k in range(4)}


def test_consistent_triplet_is_identity():
    edges = chain_edges(square_poses(), [(0, 1), (1, 2), (0, 2)])
    (c,) = triplet_checks(edges)
    assert c.stations == (0, 1, 2) and c.passed
    assert c.angle_deg < 1e-6 and c.translation_m < 1e-12


def test_perturbed_edge_fails_its_triplets():
    poses = square_poses()
    edges = chain_edges(poses, [(0, 1), (1, 2), (0, 2), (2, 3), (1, 3), (0, 3)])
    edges[0].transform = edges[0].transform @ RigidTransform(so3_exp(np.radians([0, 5, 0])), np.zeros(3))
    checks = triplet_checks(edges)
    assert enumerate_triplets(edges) == [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)]
    assert [c.passed for c in checks] == [False, False, True, True]
    # every neighbour of the bad edge shares one failing triplet with it
    survivors = success_rate_filter(edges, checks, 0.5)
    assert [e.key for e in survivors] == [(1, 2), (0, 2), (2, 3), (1, 3), (0, 3)]
    assert (edges[0].passed, edges[0].involved) == (0, 2)
    assert [e.success_rate for e in edges] == [0.0, 0.5, 0.5, 1.0, 0.5, 0.5]
    assert [e.key for e in success_rate_filter(edges, checks, 0.6)] == [(2, 3)]


def test_success_rate_thresholds():
    poses = square_poses()
    edges = chain_edges(poses, [(0, 1), (1, 2), (0, 2), (2, 3), (1, 3), (0, 3)])
    checks = triplet_checks(edges)
    success_rate_filter(edges, checks)
    assert all((e.passed, e.involved) == (2, 2) for e in edges)
    # an edge failing three of four triplets falls below any threshold above 1/4
    checks[1].passed = checks[2].passed = False
    checks[0].passed = False
    success_rate_filter(edges, checks, 0.6)
    e02 = next(e for e in edges if e.key == (0, 2))
    assert e02.passed == 0 and e02.state == "sr-fail"


def test_isolated_edge_kept():
    poses = square_poses()
    edges = chain_edges(poses, [(0, 1), (1, 2), (0, 2), (2, 3)])
    survivors = success_rate_filter(edges, triplet_checks(edges))
    assert (2, 3) in [e.key for e in survivors]
    assert edges[3].involved == 0


def test_rc_passes_pure_translation_error_tc_does_not():
    poses = square_poses()
    edges = chain_edges(poses, [(0, 1), (1, 2), (0, 2)])
    edges[0].transform = RigidTransform(edges[0].transform.R, edges[0].transform.t + [0.5, 0, 0])
    assert len(baseline_checks(edges, "rc")) == 3
    assert baseline_checks(edges, "tc") == []
    with pytest.raises(ValueError):
        baseline_checks(edges, "xx")


def test_validate_edges_without_grid(ambiguous_scene):
    sc, grids = ambiguous_scene
    edges = chain_edges(sc.poses, sc.window_pairs)
    cfg = ValidationConfig(use_grid=False)
    survivors, rep = validate_edges(edges, grids, sc.extrinsic, cfg)
    assert len(survivors) == len(edges) and rep["escalations"] == 0


def test_residual_check_escalates_threshold(ambiguous_scene):
    sc, grids = ambiguous_scene
    edges = chain_edges(sc.poses, sc.window_pairs)
    calls = []

    def always_bad(survivors):
        calls.append(len(survivors))
        return True

    _, rep = validate_edges(edges, grids, sc.extrinsic, ValidationConfig(max_escalations=2), always_bad)
    assert rep["escalations"] == 2 and len(calls) == 2
    assert rep["sr_threshold"] == pytest.approx(0.8)


def test_confusion_conventions():
    poses = square_poses()
    edges = chain_edges(poses, [(0, 1), (1, 2), (0, 2), (2, 3)])
    edges[0].transform = edges[0].transform @ RigidTransform(np.eye(3), [1.0, 0, 0])
    edges[3].transform = edges[3].transform @ RigidTransform(np.eye(3), [1.0, 0, 0])
    labels = label_outliers(edges, poses)
    assert labels == {(0, 1): True, (1, 2): False, (0, 2): False, (2, 3): True}
    # removed: one true outlier and one inlier
    rep = confusion_report(edges, [edges[2], edges[3]], labels)
    assert rep["matrix"] == [[1, 1], [1, 1]]
    assert rep["recall"] == 0.5 and rep["precision"] == 0.5
    rep = confusion_report(edges, edges, labels)
    assert rep["no_predictions"] and rep["recall"] == 0.0 and rep["precision"] == 1.0
