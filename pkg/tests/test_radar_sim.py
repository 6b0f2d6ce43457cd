import numpy as np
import pytest
from scipy.stats import chisquare

from radargrid.core import EgoPose, GridSpec, SensorMount
from radargrid.radar_sim import (Box, PointTarget, Scenario, Segment, SimParams, Trajectory, Waypoint, WorldModel,
                                 ground_truth, occluded, occupied_mask, simulate_scan, visible_mask)

FRONT = SensorMount(0, fov_azimuth=1.0, max_range=200.0)
STILL = EgoPose(0.0, 0.0, 0.0)
QUIET = SimParams(p_detect=1.0, sigma_r=0.0, sigma_phi=0.0, sigma_rr=0.0, clutter_rate=0.0)


def test_noiseless_point_target_is_exact(rng):
    world = WorldModel(points=[PointTarget(80.0, 0.0)])
    scan = simulate_scan(world, 0.0, [FRONT], STILL, QUIET, rng)
    assert len(scan) == 1
    assert (scan.r[0], scan.phi[0], scan.rr[0]) == (80.0, 0.0, 0.0)


def test_receding_target_doppler(rng):
    world = WorldModel(points=[PointTarget(30.0, 0.0, vx=15.0)])
    scan = simulate_scan(world, 0.0, [FRONT], STILL, QUIET, rng)
    assert scan.rr[0] == pytest.approx(15.0)


def test_ego_motion_enters_range_rate(rng):
    world = WorldModel(points=[PointTarget(30.0, 0.0)])
    scan = simulate_scan(world, 0.0, [FRONT], EgoPose(0.0, 0.0, 0.0, vx=8.0), QUIET, rng)
    assert scan.rr[0] == pytest.approx(-8.0)


def test_wall_scan_matches_geometry_exactly(rng):
    # 10 m wall at x = 20 sampled every 0.5 m, offset half a step from its start
    world = WorldModel(segments=[Segment(20.0, -5.0, 20.0, 5.0)])
    scan = simulate_scan(world, 0.0, [FRONT], STILL, QUIET, rng)
    ys = -5.0 + 0.5 * (np.arange(20) + 0.5)
    np.testing.assert_allclose(scan.r, np.hypot(20.0, ys), rtol=1e-14)
    np.testing.assert_allclose(scan.phi, np.arctan2(ys, 20.0), atol=1e-14)
    np.testing.assert_array_equal(scan.rr, 0.0)
    np.testing.assert_array_equal(scan.sensor_id, 0)


def test_target_behind_wall_is_hidden(rng):
    world = WorldModel(segments=[Segment(10.0, -3.0, 10.0, 3.0)], points=[PointTarget(30.0, 0.0)])
    scan = simulate_scan(world, 0.0, [FRONT], STILL, QUIET, rng)
    assert not np.any(np.isclose(scan.r, 30.0))
    assert np.all(scan.r < 11.0)


def test_curb_does_not_occlude(rng):
    world = WorldModel(segments=[Segment(10.0, -3.0, 10.0, 3.0, occludes=False)], points=[PointTarget(30.0, 0.0)])
    scan = simulate_scan(world, 0.0, [FRONT], STILL, QUIET, rng)
    assert np.any(scan.r == 30.0)


def test_occluded_helper():
    segs = [Segment(5.0, -1.0, 5.0, 1.0)]
    got = occluded(0.0, 0.0, np.array([10.0, 10.0, 4.0]), np.array([0.0, 5.0, 0.0]), None, segs)
    assert got.tolist() == [True, False, False]


def test_out_of_cone_and_range_are_not_seen(rng):
    world = WorldModel(points=[PointTarget(0.0, 30.0), PointTarget(250.0, 0.0)])
    assert len(simulate_scan(world, 0.0, [FRONT], STILL, QUIET, rng)) == 0


def test_range_alias_histogram_matches_binomial(rng):
    sim = SimParams(p_detect=1.0, sigma_r=0.0, sigma_phi=0.0, sigma_rr=0.0, clutter_rate=0.0, alias_k_pos=1)
    world = WorldModel(points=[PointTarget(80.0, 0.0)])
    shifts = np.empty(10000, dtype=int)
    for k in range(shifts.size):
        scan = simulate_scan(world, 0.0, [FRONT], STILL, sim, rng)
        shifts[k] = round((scan.r[0] - 80.0) / sim.delta_r)
    obs = np.bincount(shifts + 1, minlength=3)
    assert obs.sum() == 10000
    assert chisquare(obs, 10000 * np.array([0.25, 0.5, 0.25])).pvalue > 0.01


def test_clutter_is_poisson_inside_cone(rng):
    sim = SimParams(clutter_rate=5.0)
    counts = []
    for _ in range(400):
        scan = simulate_scan(WorldModel(), 0.0, [FRONT], STILL, sim, rng)
        assert np.all(np.abs(scan.phi) <= FRONT.fov_azimuth)
        assert np.all((scan.r > 0) & (scan.r <= FRONT.max_range))
        counts.append(len(scan))
    assert np.mean(counts) == pytest.approx(5.0, abs=0.35)


def test_same_seed_same_scans():
    world = WorldModel(segments=[Segment(20.0, -5.0, 20.0, 5.0)], points=[PointTarget(30.0, 2.0, vx=3.0)])
    sim = SimParams(alias_k_pos=1, alias_k_rr=1)
    scans = [simulate_scan(world, 0.0, [FRONT], STILL, sim, np.random.default_rng(5)) for _ in range(2)]
    for f in ("r", "phi", "rr", "sensor_id"):
        np.testing.assert_array_equal(getattr(scans[0], f), getattr(scans[1], f))


def test_empty_world_has_empty_mask():
    spec = GridSpec(0.5, 10.0, 10.0, 10.0)
    assert not ground_truth(WorldModel(), 0.0, spec).occupied.any()


def test_grid_aligned_box_covers_sixteen_cells():
    spec = GridSpec(0.5, 10.0, 10.0, 10.0, origin=(-5.0, -5.0))
    mask = occupied_mask(WorldModel(boxes=[Box(1.0, 1.0, 2.0, 2.0)]), 0.0, spec)
    assert mask.sum() == 16
    ix, iy = np.nonzero(mask)
    assert (ix.min(), ix.max(), iy.min(), iy.max()) == (10, 13, 10, 13)


def test_box_moves_with_time():
    spec = GridSpec(0.5, 10.0, 10.0, 10.0, origin=(-5.0, -5.0))
    world = WorldModel(boxes=[Box(1.0, 1.0, 2.0, 2.0, vx=1.0)])
    a = occupied_mask(world, 0.0, spec)
    b = occupied_mask(world, 1.0, spec)
    np.testing.assert_array_equal(b[2:], a[:-2])
    gt = ground_truth(world, 1.0, spec)
    assert gt.objects[0]["x"] == pytest.approx(2.0)


def test_mask_does_not_depend_on_platform_motion():
    spec = GridSpec(0.5, 10.0, 10.0, 10.0, origin=(-5.0, -5.0))
    w1 = WorldModel(segments=[Segment(-3.0, 2.0, 4.0, 2.0)], trajectory=Trajectory((Waypoint(0, 0),)))
    w2 = WorldModel(segments=[Segment(-3.0, 2.0, 4.0, 2.0)],
                    trajectory=Trajectory((Waypoint(0, 0, 5.0), Waypoint(50, 0, 5.0))))
    np.testing.assert_array_equal(occupied_mask(w1, 1.0, spec), occupied_mask(w2, 1.0, spec))


def test_visible_mask_respects_walls():
    spec = GridSpec(1.0, 20.0, 1.0, 10.0, origin=(0.0, -10.0))
    world = WorldModel(segments=[Segment(5.0, -2.0, 5.0, 2.0)])
    vis = visible_mask(world, 0.0, [FRONT], STILL, spec)
    assert vis[2, 10] and not vis[15, 10]


def test_trajectory_pose_along_waypoints():
    tr = Trajectory((Waypoint(0.0, 0.0, 10.0), Waypoint(100.0, 0.0, 10.0)))
    p = tr.pose(2.0)
    assert (p.x, p.y) == pytest.approx((20.0, 0.0))
    assert p.vx == pytest.approx(10.0)


def test_scenario_clutter_window():
    sc = Scenario("burst", WorldModel(), SimParams(clutter_rate=20.0), (FRONT,), duration=1.0, dt=0.1,
                  clutter_until=0.5)
    counts = [len(scan) for _, scan in sc.run(1)]
    assert len(counts) == 10
    assert all(c > 0 for c in counts[:5]) and all(c == 0 for c in counts[5:])


def test_segment_validation():
    with pytest.raises(ValueError):
        Segment(1.0, 1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        Segment(0.0, 0.0, 1.0, 0.0, reflectivity=2.0)
