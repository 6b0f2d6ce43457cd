import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chisquare

from radargrid.core import (Detection, DetectionArrays, EgoPose, GridSpec, RingWindow, SensorModelParams,
                            SensorMount, sensor_frame, world_to_polar)
from radargrid.sensor_models import occupancy_likelihood, velocity_likelihood
from radargrid.velocity_layer import (MotionParams, Particles, ResampleParams, VelocityConfig, VelocityLayer,
                                      VelocityParams, apply_miss_penalty, associate_measurements, cell_statistics,
                                      cluster_points, compensated_range_rate, detection_frames, emit_mass_transfers,
                                      grid_statistics, hypotheses_manager, init_cell_particles, is_dynamic,
                                      predict_particles, resample_cell, systematic_indices, target_counts,
                                      update_weights)

WIDE = SensorMount(0, fov_azimuth=math.pi, max_range=300.0)
ORIGIN = EgoPose(0.0, 0.0, 0.0)


def test_predict_without_noise_is_constant_velocity(rng):
    p = Particles.from_rows([[1.0, 2.0, 3.0, -4.0, 0.5], [0.0, 0.0, 0.0, 0.0, 0.5]])
    q = predict_particles(p, MotionParams(0.0, 0.0, 0.1), rng)
    np.testing.assert_allclose(q.x, [1.3, 0.0])
    np.testing.assert_allclose(q.y, [1.6, 0.0])
    np.testing.assert_array_equal(q.vx, p.vx)
    np.testing.assert_array_equal(q.w, p.w)


def test_predict_noise_has_requested_spread(rng):
    n = 40000
    p = Particles(np.zeros(n), np.zeros(n), np.full(n, 2.0), np.zeros(n), np.full(n, 1.0 / n))
    q = predict_particles(p, MotionParams(0.05, 0.3, 0.1), rng)
    assert q.x.mean() == pytest.approx(0.2, abs=0.002)
    assert q.x.std() == pytest.approx(0.05, rel=0.03)
    assert q.vy.std() == pytest.approx(0.3, rel=0.03)
    assert q.vx.mean() == pytest.approx(2.0, abs=0.01)


def test_motion_params_validation():
    with pytest.raises(ValueError):
        MotionParams(dt=0.0)
    with pytest.raises(ValueError):
        MotionParams(sigma_vel=-1.0)


def test_transfer_fraction_example():
    ring = RingWindow(GridSpec(1.0, 5.0, 5.0, 5.0, origin=(0.0, 0.0)))
    before = Particles.from_rows([[0.5, 0.5, 10, 0, 0.3], [0.5, 0.5, 0, 0, 0.1], [0.6, 0.6, 10, 0, 0.2]],
                                 dynamic=[True, False, False])
    after = Particles.from_rows([[1.5, 0.5, 10, 0, 0.3], [0.5, 0.5, 0, 0, 0.1], [1.6, 0.6, 10, 0, 0.2]])
    src, dst, frac = emit_mass_transfers(before, after, ring, gain=0.5)
    # only the dynamic particle emits, carrying gain * 0.3 / (0.3 + 0.1 + 0.2)
    assert src.tolist() == [ring.storage_of_world(0.5, 0.5)]
    assert dst.tolist() == [ring.storage_of_world(1.5, 0.5)]
    np.testing.assert_allclose(frac, [0.25])


@given(st.integers(0, 2 ** 32 - 1))
def test_transfer_fractions_per_source_bounded_by_gain(seed):
    rng = np.random.default_rng(seed)
    ring = RingWindow(GridSpec(1.0, 5.0, 5.0, 5.0, origin=(0.0, 0.0)))
    n = 200
    b = Particles(rng.uniform(0, 10, n), rng.uniform(0, 10, n), rng.normal(0, 10, n), rng.normal(0, 10, n),
                  rng.random(n), rng.random(n) < 0.5)
    a = predict_particles(b, MotionParams(0.0, 0.0, 0.1), rng)
    src, dst, frac = emit_mass_transfers(b, a, ring, gain=0.7)
    assert np.all(src != dst)
    per = np.bincount(src, weights=frac, minlength=ring.n_cells)
    assert per.max() <= 0.7 + 1e-12


def brute_association(ring, dx, dy, ds, n, gate):
    cx, cy = ring.spec.cell_centers()
    out = {}
    for idx in np.ndindex(cx.shape):
        picks = []
        for s in sorted(set(ds.tolist())):
            cands = [(math.hypot(cx[idx] - dx[k], cy[idx] - dy[k]), k) for k in range(len(dx)) if ds[k] == s]
            cands = sorted(c for c in cands if c[0] <= gate)[:n]
            picks += [k for _, k in cands]
        if picks:
            slot = int(ring.storage_of_world(cx[idx], cy[idx]))
            out[slot] = picks
    return out


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 3), st.floats(0.5, 3.0))
def test_association_matches_brute_force(seed, n, gate):
    rng = np.random.default_rng(seed)
    ring = RingWindow(GridSpec(1.0, 6.0, 4.0, 5.0, origin=(-4.0, -5.0)))
    m = 25
    dx, dy = rng.uniform(-6, 8, m), rng.uniform(-7, 7, m)
    ds = rng.integers(0, 2, m)
    got = associate_measurements(ring, dx, dy, ds, n, gate).as_dict()
    want = brute_association(ring, dx, dy, ds, n, gate)
    assert sorted(got) == sorted(want)
    for c in want:
        assert sorted(got[c].tolist()) == sorted(want[c])


def test_association_of_empty_scan():
    ring = RingWindow(GridSpec(1.0, 2.0, 2.0, 2.0))
    a = associate_measurements(ring, [], [], [], 2, 2.0)
    assert a.as_dict() == {} and a.candidates(0).size == 0


def test_weight_update_takes_best_candidate(rng):
    sm = SensorModelParams()
    spec = GridSpec(1.0, 30.0, 1.0, 5.0, origin=(0.0, -5.0))
    ring = RingWindow(spec)
    dets = [Detection(0, 0.0, 20.0, 0.02, 3.0, sigma_r=0.5, sigma_phi=0.02),
            Detection(0, 0.0, 20.5, 0.0, -1.0, sigma_r=0.5, sigma_phi=0.02)]
    scan = DetectionArrays.from_detections(dets)
    frames = {0: sensor_frame(WIDE, ORIGIN)}
    df = detection_frames(scan, frames)
    n = 300
    p = Particles(rng.uniform(18, 22, n), rng.uniform(-1.5, 1.5, n), rng.normal(0, 4, n), rng.normal(0, 4, n),
                  rng.random(n))
    cell = ring.storage_of_world(p.x, p.y)
    order = np.argsort(cell, kind="stable")
    p, cell = p.take(order), cell[order]
    offsets = np.zeros(ring.n_cells + 1, dtype=np.int64)
    np.cumsum(np.bincount(cell, minlength=ring.n_cells), out=offsets[1:])
    wx = np.array([d.r * math.cos(d.phi) for d in dets])
    wy = np.array([d.r * math.sin(d.phi) for d in dets])
    assoc = associate_measurements(ring, wx, wy, scan.sensor_id, 2, 2.0)
    w0 = p.w.copy()
    update_weights(p, offsets, assoc, scan, df, sm, gain=20.0, floor=1e-3)
    table = assoc.as_dict()
    checked = 0
    for i in range(n):
        cands = table.get(int(cell[i]), [])
        if len(cands) == 0:
            assert p.w[i] == w0[i]
            continue
        checked += 1
        polar = world_to_polar(p.x[i], p.y[i], frames[0])
        best = max(occupancy_likelihood(polar, dets[k], sm)
                   * velocity_likelihood((p.x[i], p.y[i], p.vx[i], p.vy[i]), dets[k], WIDE, ORIGIN, sm)
                   for k in cands)
        assert p.w[i] == pytest.approx(w0[i] * (1e-3 + 20.0 * best), rel=1e-5, abs=1e-12)
    assert checked > 100


def test_miss_penalty_example():
    p = Particles.from_rows([[0.5, 0.5, 5, 0, 0.4], [0.5, 0.5, 0.5, 0, 0.6], [1.5, 0.5, 5, 0, 1.0]])
    has = np.array([False, True])
    cell_of = np.array([0, 0, 1])
    lost = apply_miss_penalty(p, has, cell_of, {}, {}, p_miss=0.2, miss_speed=2.0)
    np.testing.assert_allclose(p.w, [0.08, 0.6, 1.0])
    np.testing.assert_allclose(lost, [0.32, 0.0])


@given(st.integers(0, 2 ** 32 - 1), st.floats(-1e5, 1e5))
def test_cell_statistics_match_weighted_covariance(seed, offset):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 50))
    vx, vy = offset + rng.normal(0, 3, n), rng.normal(0, 1, n) - offset
    w = rng.random(n) + 1e-3
    s = cell_statistics(vx, vy, w)
    np.testing.assert_allclose(s.mean, [np.average(vx, weights=w), np.average(vy, weights=w)], rtol=1e-12)
    np.testing.assert_allclose(s.cov, np.cov(np.vstack([vx, vy]), aweights=w, bias=True), rtol=1e-7, atol=1e-9)
    assert s.weight_sum == pytest.approx(w.sum())


def test_cell_statistics_empty_is_invalid():
    s = cell_statistics([], [], [])
    assert not s.valid and s.particle_count == 0


def test_grid_statistics_agree_with_cell_statistics(rng):
    n = 500
    p = Particles(np.zeros(n), np.zeros(n), rng.normal(3, 2, n), rng.normal(-1, 1, n), rng.random(n))
    cell_of = rng.integers(0, 7, n)
    g = grid_statistics(p, cell_of, 8)
    for c in range(7):
        m = cell_of == c
        s = cell_statistics(p.vx[m], p.vy[m], p.w[m])
        np.testing.assert_allclose([g.mean_x[c], g.mean_y[c]], s.mean, rtol=1e-10)
        np.testing.assert_allclose([[g.cov_xx[c], g.cov_xy[c]], [g.cov_xy[c], g.cov_yy[c]]], s.cov, rtol=1e-8,
                                   atol=1e-12)
    assert not g.valid[7] and g.mean_x[7] == 0.0


def test_grid_statistics_prior_pulls_towards_zero():
    p = Particles.from_rows([[0, 0, 4.0, 0, 1.0]])
    g = grid_statistics(p, np.array([0]), 1, prior_weight=np.array([3.0]), prior_var=1.0)
    assert g.mean_x[0] == pytest.approx(1.0)
    # mixture of a point at 4 (weight 1/4) and N(0, 1) (weight 3/4) about the mean 1
    assert g.cov_xx[0] == pytest.approx(0.25 * 9.0 + 0.75 * (1.0 + 1.0))


@pytest.mark.parametrize("count, W, expected", [(10, 1.0, 10), (10, 3.0, 20), (10, 0.1, 5), (2, 1.0, 4),
                                                (60, 2.0, 64), (0, 0.0, 4)])
def test_target_counts_examples(count, W, expected):
    rp = ResampleParams()
    assert target_counts(np.array([count]), np.array([W]), rp)[0] == expected


def test_target_counts_respect_cap():
    rp = ResampleParams(max_total=100)
    t = target_counts(np.full(10, 20), np.full(10, 5.0), rp)
    assert t.sum() <= 100 and t.min() >= rp.n_min


@given(st.lists(st.floats(1e-6, 1.0), min_size=1, max_size=30), st.integers(1, 64), st.integers(0, 2 ** 32 - 1))
def test_systematic_copies_are_floor_or_ceil(ws, n_target, seed):
    w = np.array(ws) / np.sum(ws)
    cum = np.cumsum(w)
    cum[-1] = 1.0
    idx = systematic_indices(cum, np.array([0]), np.array([len(w)]), np.array([n_target]),
                             np.random.default_rng(seed))
    copies = np.bincount(idx, minlength=len(w))
    expected = n_target * w
    assert copies.sum() == n_target
    assert np.all(copies >= np.floor(expected - 1e-9)) and np.all(copies <= np.ceil(expected + 1e-9))


def test_resample_cell_monte_carlo(rng):
    p = Particles.from_rows([[0, 0, 1, 0, 0.1], [0, 0, 2, 0, 0.6], [0, 0, 3, 0, 0.3]])
    tallies = np.zeros(3)
    for _ in range(2000):
        out = resample_cell(p, ResampleParams(), rng, n_target=7)
        assert len(out) == 7
        np.testing.assert_allclose(out.w, 1 / 7)
        tallies += np.bincount(np.rint(out.vx).astype(int) - 1, minlength=3)
    np.testing.assert_allclose(tallies / tallies.sum(), [0.1, 0.6, 0.3], atol=0.01)


def test_resample_cell_rejects_empty(rng):
    with pytest.raises(ValueError):
        resample_cell(Particles.empty(), ResampleParams(), rng)


def test_init_cell_particles_bounds(rng):
    p = init_cell_particles((2.0, -3.0), 0.5, 5000, 2.0, rng)
    assert p.x.min() >= 2.0 and p.x.max() < 2.5 and p.y.min() >= -3.0 and p.y.max() < -2.5
    assert p.speed().max() <= 2.0
    np.testing.assert_allclose(p.w, 1 / 5000)
    # uniform over the disk: half the particles lie inside radius sqrt(0.5) * 2
    assert np.mean(p.speed() < 2.0 * math.sqrt(0.5)) == pytest.approx(0.5, abs=0.03)


def test_compensated_range_rate_static_target():
    pose = EgoPose(0.0, 0.0, 0.0, vx=10.0)
    f = {0: sensor_frame(WIDE, pose)}
    scan = DetectionArrays.from_detections([Detection(0, 0.0, 20.0, 0.3, -10.0 * math.cos(0.3))])
    np.testing.assert_allclose(compensated_range_rate(scan, detection_frames(scan, f)), [0.0], atol=1e-12)


def test_is_dynamic_with_aliases():
    sm = SensorModelParams()
    got = is_dynamic(np.array([0.5, 5.0, 12.0, -13.0, 6.25]), sm, v_dyn=1.0)
    assert got.tolist() == [False, True, False, False, True]


def test_cluster_points_single_linkage():
    labels = cluster_points(np.array([0.0, 1.5, 3.0, 10.0]), np.zeros(4), 2.0)
    assert labels[0] == labels[1] == labels[2] != labels[3]


def test_hypotheses_manager_alias_histogram(rng):
    sm = SensorModelParams()
    vp = VelocityParams(spawn_per_cell=64, v_cross=0.0)
    ring = RingWindow(GridSpec(1.0, 40.0, 10.0, 10.0, origin=(-10.0, -10.0)))
    scan = DetectionArrays.from_detections([Detection(0, 0.0, 20.0, 0.0, 5.0, sigma_rr=0.05)])
    frames = {0: sensor_frame(WIDE, ORIGIN)}
    res = hypotheses_manager(scan, detection_frames(scan, frames), ring, sm, vp, rng)
    assert res.n_clusters == 1 and len(res.particles) == 64 * res.cells.size
    assert np.all(res.particles.dynamic)
    radial = (res.particles.x * res.particles.vx + res.particles.y * res.particles.vy) / np.hypot(
        res.particles.x, res.particles.y)
    alias = np.rint((5.0 - radial) / sm.delta_rr).astype(int)
    np.testing.assert_allclose(radial, 5.0 - alias * sm.delta_rr, atol=0.3)
    obs = np.bincount(alias + 1, minlength=3)
    assert chisquare(obs, obs.sum() * np.array([0.25, 0.5, 0.25])).pvalue > 1e-3


def test_hypotheses_manager_ignores_static_returns(rng):
    ring = RingWindow(GridSpec(1.0, 40.0, 10.0, 10.0, origin=(-10.0, -10.0)))
    scan = DetectionArrays.from_detections([Detection(0, 0.0, 20.0, 0.0, 0.2), Detection(0, 0.0, 15.0, 0.0, 12.4)])
    frames = {0: sensor_frame(WIDE, ORIGIN)}
    res = hypotheses_manager(scan, detection_frames(scan, frames), ring, SensorModelParams(), VelocityParams(), rng)
    assert res.cells.size == 0


def small_layer(rng, **resample):
    cfg = VelocityConfig(resample=ResampleParams(**resample))
    return VelocityLayer(GridSpec(1.0, 6.0, 6.0, 6.0, origin=(0.0, 0.0)), cfg, rng)


def test_layer_counts_stay_in_bounds(rng):
    layer = small_layer(rng)
    layer.particles.w[:] = rng.random(len(layer.particles)) * 5
    layer.resample()
    assert layer.counts.min() >= 4 and layer.counts.max() <= 64
    assert layer.offsets[-1] == len(layer.particles)
    np.testing.assert_array_equal(np.diff(layer.cell_of) >= 0, True)


def test_layer_scroll_keeps_particles_in_overlap(rng):
    layer = small_layer(rng)
    keep = layer.particles.x >= 2.0
    kept = set(zip(layer.particles.x[keep].tolist(), layer.particles.y[keep].tolist()))
    new = layer.scroll_to(GridSpec(1.0, 6.0, 6.0, 6.0, origin=(2.0, 0.0)))
    assert new == 2 * 12
    now = set(zip(layer.particles.x.tolist(), layer.particles.y.tolist()))
    assert kept <= now
    assert layer.counts.min() >= 4


def test_velocity_params_validation():
    with pytest.raises(ValueError):
        VelocityParams(miss_scope="cone")
    with pytest.raises(ValueError):
        VelocityParams(birth_share=0.0)
    with pytest.raises(ValueError):
        ResampleParams(n_min=10, n_max=5)
