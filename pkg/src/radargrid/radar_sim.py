"""Flatland world and radar simulator with noise, ambiguity shifts, occlusion and clutter."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import DetectionArrays, EgoPose, GridSpec, SensorMount, sensor_frame, wrap_angle


@dataclass(frozen=True)
class Segment:
    x0: float
    y0: float
    x1: float
    y1: float
    reflectivity: float = 1.0
    # low structures such as curbs reflect but do not hide what is behind them
    occludes: bool = True

    def __post_init__(self):
        if math.hypot(self.x1 - self.x0, self.y1 - self.y0) <= 0:
            raise ValueError("segment has zero length")
        if not 0 <= self.reflectivity <= 1:
            raise ValueError("reflectivity must lie in [0, 1]")

    @property
    def length(self) -> float:
        return math.hypot(self.x1 - self.x0, self.y1 - self.y0)


@dataclass(frozen=True)
class Box:
    """Rectangle moving at constant velocity; ``x, y`` is its centre at t = 0."""

    x: float
    y: float
    length: float
    width: float
    heading: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    reflectivity: float = 1.0

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ValueError("box dimensions must be > 0")

    def center(self, t: float) -> Tuple[float, float]:
        return self.x + self.vx * t, self.y + self.vy * t

    def corners(self, t: float) -> np.ndarray:
        cx, cy = self.center(t)
        c, s = math.cos(self.heading), math.sin(self.heading)
        hl, hw = 0.5 * self.length, 0.5 * self.width
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        return np.column_stack([cx + c * local[:, 0] - s * local[:, 1], cy + s * local[:, 0] + c * local[:, 1]])

    def edges(self, t: float) -> List[Segment]:
        c = self.corners(t)
        return [Segment(*c[i], *c[(i + 1) % 4], self.reflectivity) for i in range(4)]

    def contains(self, px, py, t: float) -> np.ndarray:
        cx, cy = self.center(t)
        c, s = math.cos(self.heading), math.sin(self.heading)
        dx, dy = np.asarray(px) - cx, np.asarray(py) - cy
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (np.abs(u) < 0.5 * self.length) & (np.abs(v) < 0.5 * self.width)


@dataclass(frozen=True)
class PointTarget:
    x: float
    y: float
    vx: float = 0.0
    vy: float = 0.0
    reflectivity: float = 1.0

    def position(self, t: float) -> Tuple[float, float]:
        return self.x + self.vx * t, self.y + self.vy * t


@dataclass(frozen=True)
class Waypoint:
    x: float
    y: float
    speed: float = 0.0


@dataclass(frozen=True)
class Trajectory:
    """Piecewise-linear SP path; ``speed`` of a waypoint applies to the leg leaving it.

    A trajectory that never moves keeps ``heading`` (and ``yaw_rate`` if set).
    """

    waypoints: Tuple[Waypoint, ...] = (Waypoint(0.0, 0.0),)
    heading: float = 0.0
    yaw_rate: float = 0.0

    def __post_init__(self):
        if not self.waypoints:
            raise ValueError("trajectory needs at least one waypoint")
        for a, b in zip(self.waypoints[:-1], self.waypoints[1:]):
            if a.speed < 0:
                raise ValueError("waypoint speeds must be >= 0")
            if a.speed == 0 and (a.x, a.y) != (b.x, b.y):
                raise ValueError("a leg with zero speed is never completed; times must be monotone")

    def _legs(self):
        t = 0.0
        for a, b in zip(self.waypoints[:-1], self.waypoints[1:]):
            d = math.hypot(b.x - a.x, b.y - a.y)
            if d == 0:
                continue
            dur = d / a.speed
            yield t, dur, a, b, d
            t += dur

    def pose(self, t: float) -> EgoPose:
        last = self.waypoints[-1]
        heading = self.heading + self.yaw_rate * t
        for t0, dur, a, b, d in self._legs():
            if t < t0 + dur:
                s = (t - t0) / dur
                ux, uy = (b.x - a.x) / d, (b.y - a.y) / d
                return EgoPose(a.x + s * (b.x - a.x), a.y + s * (b.y - a.y), math.atan2(uy, ux),
                               a.speed * ux, a.speed * uy, t)
            heading = math.atan2(b.y - a.y, b.x - a.x)
        return EgoPose(last.x, last.y, heading, 0.0, 0.0, t)


@dataclass
class WorldModel:
    segments: List[Segment] = field(default_factory=list)
    boxes: List[Box] = field(default_factory=list)
    points: List[PointTarget] = field(default_factory=list)
    trajectory: Trajectory = field(default_factory=Trajectory)


@dataclass(frozen=True)
class SimParams:
    """Measurement generation settings.

    ``alias_k_pos``/``alias_k_rr`` bound the injected shift indices (0 turns
    aliasing off); shifts are drawn as ``Binomial(2k, alias_p) - k``.
    """

    spacing: float = 0.5
    p_detect: float = 0.9
    sigma_r: float = 0.3
    sigma_phi: float = 0.01
    sigma_rr: float = 0.2
    delta_r: float = 15.0
    delta_phi: float = 0.35
    delta_rr: float = 12.5
    alias_k_pos: int = 0
    alias_k_rr: int = 0
    alias_p: float = 0.5
    clutter_rate: float = 2.0
    clutter_speed: float = 15.0
    report_sigma_r: Optional[float] = None
    report_sigma_phi: Optional[float] = None
    report_sigma_rr: Optional[float] = None

    def __post_init__(self):
        if self.spacing <= 0:
            raise ValueError("spacing must be > 0")
        if not 0 <= self.p_detect <= 1 or not 0 <= self.alias_p <= 1:
            raise ValueError("probabilities must lie in [0, 1]")
        if min(self.sigma_r, self.sigma_phi, self.sigma_rr, self.clutter_rate) < 0:
            raise ValueError("noise levels and rates must be >= 0")
        if self.alias_k_pos < 0 or self.alias_k_rr < 0:
            raise ValueError("alias bounds must be >= 0")

    def reported(self) -> Tuple[float, float, float]:
        """Noise levels written into each detection; never zero even for a noiseless run."""
        def pick(rep, true, floor):
            return rep if rep is not None else max(true, floor)
        return (pick(self.report_sigma_r, self.sigma_r, 0.05), pick(self.report_sigma_phi, self.sigma_phi, 0.002),
                pick(self.report_sigma_rr, self.sigma_rr, 0.05))


def _surfaces(world: WorldModel, t: float):
    """All reflecting segments at time ``t`` with their velocities."""
    segs, vel = [], []
    for s in world.segments:
        segs.append(s)
        vel.append((0.0, 0.0))
    for b in world.boxes:
        for e in b.edges(t):
            segs.append(e)
            vel.append((b.vx, b.vy))
    return segs, np.array(vel, dtype=float).reshape(-1, 2)


def _sample_points(segs: Sequence[Segment], spacing: float):
    """Points at fixed arc-length spacing, offset half a step from each segment start."""
    xs, ys, owner = [], [], []
    for k, s in enumerate(segs):
        n = max(1, int(math.floor(s.length / spacing)))
        u = (np.arange(n) + 0.5) / n
        xs.append(s.x0 + u * (s.x1 - s.x0))
        ys.append(s.y0 + u * (s.y1 - s.y0))
        owner.append(np.full(n, k))
    if not xs:
        e = np.zeros(0)
        return e, e.copy(), np.zeros(0, dtype=np.int64)
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(owner)


def occluded(sx: float, sy: float, px, py, owner, segs: Sequence[Segment], tol: float = 1e-6) -> np.ndarray:
    """True where the sight line from the sensor to a point crosses another segment first."""
    px, py = np.asarray(px, dtype=float), np.asarray(py, dtype=float)
    out = np.zeros(px.shape, dtype=bool)
    if not segs or px.size == 0:
        return out
    a = np.array([[s.x0, s.y0, s.x1, s.y1] for s in segs])
    # ray: S + t (P - S), t in (0, 1); segment: A + u (B - A), u in [0, 1]
    rx = (px - sx)[:, None]
    ry = (py - sy)[:, None]
    ex = (a[:, 2] - a[:, 0])[None, :]
    ey = (a[:, 3] - a[:, 1])[None, :]
    qx = (a[:, 0] - sx)[None, :]
    qy = (a[:, 1] - sy)[None, :]
    den = rx * ey - ry * ex
    ok = np.abs(den) > 1e-12
    den = np.where(ok, den, 1.0)
    t = (qx * ey - qy * ex) / den
    u = (qx * ry - qy * rx) / den
    blocks = np.array([s.occludes for s in segs])[None, :]
    hit = ok & blocks & (t > tol) & (t < 1.0 - 1e-4) & (u >= 0.0) & (u <= 1.0)
    if owner is not None:
        owner = np.asarray(owner)
        own = np.flatnonzero(owner >= 0)
        hit[own, owner[own]] = False
    return hit.any(axis=1)


def _shifts(rng: np.random.Generator, k: int, p: float, n: int) -> np.ndarray:
    if k == 0:
        return np.zeros(n, dtype=np.int64)
    return rng.binomial(2 * k, p, size=n) - k


def simulate_scan(world: WorldModel, t: float, mounts: Sequence[SensorMount], pose: EgoPose,
                  sim: SimParams, rng: np.random.Generator) -> DetectionArrays:
    """Detections of every mount at time ``t``; one row per return, clutter last per sensor."""
    segs, seg_vel = _surfaces(world, t)
    hx, hy, owner = _sample_points(segs, sim.spacing)
    refl = np.array([s.reflectivity for s in segs])[owner] if len(segs) else np.zeros(0)
    hvx, hvy = (seg_vel[owner, 0], seg_vel[owner, 1]) if len(segs) else (np.zeros(0), np.zeros(0))
    if world.points:
        pts = np.array([(*p.position(t), p.vx, p.vy, p.reflectivity) for p in world.points])
        hx, hy = np.concatenate([hx, pts[:, 0]]), np.concatenate([hy, pts[:, 1]])
        hvx, hvy = np.concatenate([hvx, pts[:, 2]]), np.concatenate([hvy, pts[:, 3]])
        refl = np.concatenate([refl, pts[:, 4]])
        owner = np.concatenate([owner, np.full(len(pts), -1)])
    rep_r, rep_p, rep_rr = sim.reported()
    cols: Dict[str, list] = {k: [] for k in ("sid", "r", "phi", "rr")}
    for m in mounts:
        f = sensor_frame(m, pose)
        dx, dy = hx - f.x, hy - f.y
        r = np.hypot(dx, dy)
        phi = wrap_angle(np.arctan2(dy, dx) - f.yaw)
        vis = (r > 0) & (r <= m.max_range) & (np.abs(phi) <= m.fov_azimuth)
        idx = np.flatnonzero(vis)
        if idx.size:
            idx = idx[~occluded(f.x, f.y, hx[idx], hy[idx], owner[idx], segs)]
        prob = sim.p_detect * refl[idx]
        if np.any(prob < 1.0):
            idx = idx[rng.random(idx.size) < prob]
        n = idx.size
        rt = r[idx]
        pt = phi[idx]
        ux, uy = dx[idx] / rt, dy[idx] / rt
        rrt = ux * (hvx[idx] - f.vx) + uy * (hvy[idx] - f.vy)
        mr = rt + (rng.normal(0.0, sim.sigma_r, n) if sim.sigma_r > 0 else 0.0)
        mp = pt + (rng.normal(0.0, sim.sigma_phi, n) if sim.sigma_phi > 0 else 0.0)
        mrr = rrt + (rng.normal(0.0, sim.sigma_rr, n) if sim.sigma_rr > 0 else 0.0)
        mr = mr + _shifts(rng, sim.alias_k_pos, sim.alias_p, n) * sim.delta_r
        mp = wrap_angle(mp + _shifts(rng, sim.alias_k_pos, sim.alias_p, n) * sim.delta_phi)
        mrr = mrr + _shifts(rng, sim.alias_k_rr, sim.alias_p, n) * sim.delta_rr
        keep = (mr > 0) & (np.abs(mp) <= m.fov_azimuth)
        nc = rng.poisson(sim.clutter_rate) if sim.clutter_rate > 0 else 0
        cr = rng.uniform(0.5, m.max_range, nc)
        cp = rng.uniform(-m.fov_azimuth, m.fov_azimuth, nc)
        ca = f.yaw + cp
        # clutter looks like a ground-fixed point plus a spurious radial speed
        crr = -(np.cos(ca) * f.vx + np.sin(ca) * f.vy) + rng.uniform(-sim.clutter_speed, sim.clutter_speed, nc)
        tot = int(keep.sum()) + nc
        cols["sid"].append(np.full(tot, m.sensor_id, dtype=np.int64))
        cols["r"].append(np.concatenate([np.atleast_1d(mr)[keep], cr]))
        cols["phi"].append(np.concatenate([np.atleast_1d(mp)[keep], cp]))
        cols["rr"].append(np.concatenate([np.atleast_1d(mrr)[keep], crr]))
    if not mounts:
        return DetectionArrays.from_detections([])
    sid = np.concatenate(cols["sid"])
    n = sid.size
    return DetectionArrays(sid, np.concatenate(cols["r"]), np.concatenate(cols["phi"]),
                           np.concatenate(cols["rr"]), np.full(n, rep_r), np.full(n, rep_p),
                           np.full(n, rep_rr), np.full(n, float(t)))


@dataclass
class GroundTruth:
    occupied: np.ndarray
    spec: GridSpec
    objects: List[Dict[str, float]]


def occupied_mask(world: WorldModel, t: float, spec: GridSpec, sub: int = 8) -> np.ndarray:
    """Cells (window order) touched by a wall or overlapping a box interior."""
    nx, ny = spec.shape
    mask = np.zeros((nx, ny), dtype=bool)
    cs = spec.cell_size
    ox, oy = spec.origin
    for s in world.segments:
        n = max(2, int(math.ceil(s.length / (cs / 16.0))) + 1)
        u = np.linspace(0.0, 1.0, n)
        ix = np.floor((s.x0 + u * (s.x1 - s.x0) - ox) / cs).astype(np.int64)
        iy = np.floor((s.y0 + u * (s.y1 - s.y0) - oy) / cs).astype(np.int64)
        ok = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
        mask[ix[ok], iy[ok]] = True
    for b in world.boxes:
        c = b.corners(t)
        lo = np.floor((c.min(axis=0) - (ox, oy)) / cs).astype(int)
        hi = np.floor((c.max(axis=0) - (ox, oy)) / cs).astype(int)
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, (nx - 1, ny - 1))
        if np.any(hi < lo):
            continue
        gx, gy = np.meshgrid(np.arange(lo[0], hi[0] + 1), np.arange(lo[1], hi[1] + 1), indexing="ij")
        off = (np.arange(sub) + 0.5) / sub
        sx = ox + (gx[..., None, None] + off[:, None]) * cs
        sy = oy + (gy[..., None, None] + off[None, :]) * cs
        inside = b.contains(sx, sy, t).any(axis=(-1, -2))
        mask[gx[inside], gy[inside]] = True
    return mask


def ground_truth(world: WorldModel, t: float, spec: GridSpec) -> GroundTruth:
    objs = []
    for i, b in enumerate(world.boxes):
        cx, cy = b.center(t)
        objs.append({"id": i, "x": cx, "y": cy, "heading": b.heading, "vx": b.vx, "vy": b.vy,
                     "length": b.length, "width": b.width})
    return GroundTruth(occupied_mask(world, t, spec), spec, objs)


@dataclass
class Scenario:
    name: str
    world: WorldModel
    sim: SimParams
    mounts: Tuple[SensorMount, ...]
    duration: float = 2.0
    dt: float = 0.1
    seed: int = 0
    clutter_until: Optional[float] = None
    engine: Optional[Dict] = None

    def times(self) -> np.ndarray:
        n = int(round(self.duration / self.dt))
        return np.arange(n) * self.dt

    def run(self, seed: Optional[int] = None):
        """Yield (pose, detections) for every scan; same seed gives identical scans."""
        rng = np.random.default_rng(self.seed if seed is None else seed)
        quiet = SimParams(**{**self.sim.__dict__, "clutter_rate": 0.0})
        for t in self.times():
            t = float(round(t, 9))
            pose = self.world.trajectory.pose(t)
            sim = self.sim if self.clutter_until is None or t < self.clutter_until else quiet
            yield pose, simulate_scan(self.world, t, self.mounts, pose, sim, rng)


def visible_mask(world: WorldModel, t: float, mounts: Sequence[SensorMount], pose: EgoPose,
                 spec: GridSpec) -> np.ndarray:
    """Cells whose centre some sensor can see directly (inside its cone and not hidden)."""
    cx, cy = spec.cell_centers()
    px, py = cx.ravel(), cy.ravel()
    segs, _ = _surfaces(world, t)
    seen = np.zeros(px.size, dtype=bool)
    for m in mounts:
        f = sensor_frame(m, pose)
        dx, dy = px - f.x, py - f.y
        r = np.hypot(dx, dy)
        phi = wrap_angle(np.arctan2(dy, dx) - f.yaw)
        idx = np.flatnonzero((r > 0) & (r <= m.max_range) & (np.abs(phi) <= m.fov_azimuth) & ~seen)
        for chunk in np.array_split(idx, max(1, idx.size // 20000)):
            if chunk.size:
                seen[chunk[~occluded(f.x, f.y, px[chunk], py[chunk], None, segs)]] = True
    return seen.reshape(cx.shape)
