"""Particle-based velocity layer.

Particles live in a struct-of-arrays store kept sorted by velocity-cell
storage slot, so every per-cell phase works on contiguous slices and the
vectorised phases use ``bincount``/``searchsorted`` over the whole store.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numba import njit
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import _kernels as K
from . import _store as S
from .core import DetectionArrays, GridSpec, RingWindow, SensorFrame, SensorModelParams, SensorMount
from .sensor_models import SINGULAR_EPS, shift_weight_array


@dataclass(frozen=True)
class MotionParams:
    sigma_pos: float = 0.05
    sigma_vel: float = 0.3
    dt: float = 0.1

    def __post_init__(self):
        if self.sigma_pos < 0 or self.sigma_vel < 0:
            raise ValueError("process noise must be >= 0")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")


@dataclass(frozen=True)
class ResampleParams:
    """Per-cell particle count bounds and the growth response to average weight.

    The response is ``clamp(w_mean / w_ref, growth_min, growth_max)`` with
    ``w_ref = 1 / n_old``. ``max_total`` optionally caps the whole store by
    shrinking growth above ``n_min`` proportionally.
    """

    n_min: int = 4
    n_max: int = 64
    growth_min: float = 0.5
    growth_max: float = 2.0
    max_total: Optional[int] = None

    def __post_init__(self):
        if not 0 < self.n_min <= self.n_max:
            raise ValueError("need 0 < n_min <= n_max")
        if not 0 < self.growth_min <= 1.0 <= self.growth_max:
            raise ValueError("need 0 < growth_min <= 1 <= growth_max")


@dataclass(frozen=True)
class VelocityParams:
    n_closest: int = 2
    gate_radius: float = 2.0
    lambda_floor: float = 1e-3
    likelihood_gain: float = 20.0
    p_miss: float = 0.2
    miss_speed: float = 2.0
    # "all": penalise unsupported fast particles everywhere; "fov": only inside a sensor cone
    miss_scope: str = "all"
    speed_range: float = 2.0
    transfer_gain: float = 0.5
    v_dyn: float = 1.0
    cluster_radius: float = 2.0
    v_cross: float = 5.0
    spawn_per_cell: int = 16
    spawn_radius: float = 1.0
    # weight share of a cell handed to newly spawned particles when the cell already holds some
    birth_share: float = 0.1

    def __post_init__(self):
        if self.n_closest < 1:
            raise ValueError("n_closest must be >= 1")
        if not 0 < self.lambda_floor <= self.p_miss <= 1:
            raise ValueError("need 0 < lambda_floor <= p_miss <= 1")
        if not 0 <= self.transfer_gain <= 1:
            raise ValueError("transfer_gain must lie in [0, 1]")
        if self.miss_scope not in ("all", "fov"):
            raise ValueError("miss_scope must be 'all' or 'fov'")
        if not 0 < self.birth_share <= 1:
            raise ValueError("birth_share must lie in (0, 1]")


@dataclass
class Particles:
    x: np.ndarray
    y: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    w: np.ndarray
    dynamic: np.ndarray = None

    def __post_init__(self):
        if self.dynamic is None:
            self.dynamic = np.zeros(len(self.x), dtype=bool)

    @classmethod
    def empty(cls) -> "Particles":
        e = np.zeros(0)
        return cls(e, e.copy(), e.copy(), e.copy(), e.copy(), np.zeros(0, dtype=bool))

    @classmethod
    def from_rows(cls, rows, dynamic=None) -> "Particles":
        a = np.asarray(rows, dtype=float).reshape(-1, 5)
        return cls(a[:, 0].copy(), a[:, 1].copy(), a[:, 2].copy(), a[:, 3].copy(), a[:, 4].copy(),
                   None if dynamic is None else np.asarray(dynamic, dtype=bool))

    def __len__(self) -> int:
        return len(self.x)

    def take(self, idx) -> "Particles":
        if isinstance(idx, np.ndarray) and idx.ndim == 1 and idx.dtype.kind in "iu":
            return Particles(*S.gather(idx.astype(np.int64, copy=False), self.x, self.y, self.vx, self.vy, self.w,
                                       self.dynamic))
        return Particles(self.x[idx], self.y[idx], self.vx[idx], self.vy[idx], self.w[idx], self.dynamic[idx])

    def copy(self) -> "Particles":
        return self.take(slice(None))

    @staticmethod
    def concat(parts: Sequence["Particles"]) -> "Particles":
        parts = [p for p in parts if len(p)]
        if not parts:
            return Particles.empty()
        return Particles(*(np.concatenate([getattr(p, f) for p in parts])
                           for f in ("x", "y", "vx", "vy", "w", "dynamic")))

    def speed(self) -> np.ndarray:
        return np.hypot(self.vx, self.vy)


@dataclass
class CellVelocityStats:
    mean: np.ndarray
    cov: np.ndarray
    particle_count: int
    weight_sum: float
    valid: bool = True


# -- prediction -----------------------------------------------------------------

def predict_particles(p: Particles, mp: MotionParams, rng: np.random.Generator) -> Particles:
    """Constant-velocity propagation with additive Gaussian process noise."""
    n = len(p)
    x = p.x + p.vx * mp.dt
    y = p.y + p.vy * mp.dt
    vx, vy = p.vx, p.vy
    if mp.sigma_pos > 0:
        x = x + rng.normal(0.0, mp.sigma_pos, n)
        y = y + rng.normal(0.0, mp.sigma_pos, n)
    if mp.sigma_vel > 0:
        vx = vx + rng.normal(0.0, mp.sigma_vel, n)
        vy = vy + rng.normal(0.0, mp.sigma_vel, n)
    return Particles(x, y, vx.copy(), vy.copy(), p.w.copy(), p.dynamic.copy())


def emit_mass_transfers(before: Particles, after: Particles, occ_ring: RingWindow,
                        gain: float = 0.5) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Occupied-evidence transfers for dynamic particles that changed occupancy cell.

    Each transfer carries ``gain * w / W_src`` where ``W_src`` is the total
    weight of all particles in the source occupancy cell before prediction,
    so per-source fractions never exceed ``gain``.
    """
    src = occ_ring.storage_of_world(before.x, before.y)
    dst = occ_ring.storage_of_world(after.x, after.y)
    moving = before.dynamic & (src >= 0) & (dst >= 0) & (src != dst)
    if not np.any(moving):
        e = np.zeros(0, dtype=np.int64)
        return e, e.copy(), np.zeros(0)
    valid = src >= 0
    w_src = np.bincount(src[valid], weights=before.w[valid], minlength=occ_ring.n_cells)
    s, d = src[moving], dst[moving]
    tot = w_src[s]
    frac = np.where(tot > 0, gain * before.w[moving] / np.where(tot > 0, tot, 1.0), 0.0)
    return s, d, frac


# -- association ------------------------------------------------------------------

@dataclass
class Association:
    """CSR table of candidate detections per velocity cell (storage slot)."""

    cells: np.ndarray
    ptr: np.ndarray
    det: np.ndarray

    def candidates(self, cell: int) -> np.ndarray:
        i = np.searchsorted(self.cells, cell)
        if i < len(self.cells) and self.cells[i] == cell:
            return self.det[self.ptr[i]:self.ptr[i + 1]]
        return np.zeros(0, dtype=np.int64)

    def as_dict(self) -> Dict[int, np.ndarray]:
        return {int(c): self.det[self.ptr[i]:self.ptr[i + 1]] for i, c in enumerate(self.cells)}


def associate_measurements(ring: RingWindow, det_x, det_y, det_sensor, n: int,
                           gate_radius: float) -> Association:
    """For each cell and each sensor keep the ``n`` detections nearest the cell centre.

    Only detections within ``gate_radius`` of the centre qualify; ties are
    broken by detection index.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    det_x = np.asarray(det_x, dtype=float)
    det_y = np.asarray(det_y, dtype=float)
    det_sensor = np.asarray(det_sensor, dtype=np.int64)
    if det_x.size == 0:
        e = np.zeros(0, dtype=np.int64)
        return Association(e, np.zeros(1, dtype=np.int64), e.copy())
    cs = ring.spec.cell_size
    h = int(math.ceil(gate_radius / cs)) + 1
    off = np.arange(-h, h + 1)
    ox, oy = np.meshgrid(off, off, indexing="ij")
    ox, oy = ox.ravel(), oy.ravel()
    gx = np.floor(det_x / cs).astype(np.int64)
    gy = np.floor(det_y / cs).astype(np.int64)
    D = det_x.size
    pdet = np.repeat(np.arange(D), ox.size)
    pgx = np.repeat(gx, ox.size) + np.tile(ox, D)
    pgy = np.repeat(gy, oy.size) + np.tile(oy, D)
    dist = np.hypot((pgx + 0.5) * cs - det_x[pdet], (pgy + 0.5) * cs - det_y[pdet])
    inside = ((pgx >= ring.gx0) & (pgx < ring.gx0 + ring.nx) & (pgy >= ring.gy0) & (pgy < ring.gy0 + ring.ny)
              & (dist <= gate_radius))
    pdet, pgx, pgy, dist = pdet[inside], pgx[inside], pgy[inside], dist[inside]
    cell = ring.storage(pgx, pgy)
    sens = det_sensor[pdet]
    order = np.lexsort((pdet, dist, sens, cell))
    cell, sens, pdet = cell[order], sens[order], pdet[order]
    if cell.size == 0:
        e = np.zeros(0, dtype=np.int64)
        return Association(e, np.zeros(1, dtype=np.int64), e.copy())
    new_group = np.ones(cell.size, dtype=bool)
    new_group[1:] = (cell[1:] != cell[:-1]) | (sens[1:] != sens[:-1])
    start = np.maximum.accumulate(np.where(new_group, np.arange(cell.size), 0))
    keep = (np.arange(cell.size) - start) < n
    cell, pdet = cell[keep], pdet[keep]
    cells, first = np.unique(cell, return_index=True)
    ptr = np.append(first, cell.size).astype(np.int64)
    return Association(cells.astype(np.int64), ptr, pdet.astype(np.int64))


# -- weight update -------------------------------------------------------------------

@njit(cache=True)
def _weight_update(px, py, pvx, pvy, w, offsets, cand_cells, cand_ptr, cand_det,
                   d_r, d_phi, d_rr, d_sr, d_sp, d_srr, d_sx, d_sy, d_syaw, d_svx, d_svy,
                   delta_r, delta_phi, delta_rr, w1, wl, rho0, eta_o, eta_v, density,
                   gain, floor, eps, best_out):
    for ci in range(cand_cells.shape[0]):
        c = cand_cells[ci]
        for p in range(offsets[c], offsets[c + 1]):
            best = 0.0
            for q in range(cand_ptr[ci], cand_ptr[ci + 1]):
                d = cand_det[q]
                dx = px[p] - d_sx[d]
                dy = py[p] - d_sy[d]
                rc = math.sqrt(dx * dx + dy * dy)
                if rc < eps:
                    continue
                pc = K.wrap(math.atan2(dy, dx) - d_syaw[d])
                lo = K.occ_lik_trunc(rc, pc, d_r[d], d_phi[d], d_sr[d], d_sp[d], delta_r, delta_phi,
                                     w1, rho0, eta_o, density)
                if lo == 0.0:
                    continue
                pred = (dx * (pvx[p] - d_svx[d]) + dy * (pvy[p] - d_svy[d])) / rc
                lam = lo * K.vel_lik(pred, d_rr[d], d_srr[d], delta_rr, wl, eta_v, density)
                if lam > best:
                    best = lam
            best_out[p] = best
            w[p] *= floor + gain * best


def detection_frames(dets: DetectionArrays, frames: Dict[int, SensorFrame]) -> np.ndarray:
    """Per-detection sensor pose columns (x, y, yaw, vx, vy)."""
    out = np.empty((len(dets), 5))
    for sid, f in frames.items():
        m = dets.sensor_id == sid
        out[m] = (f.x, f.y, f.yaw, f.vx, f.vy)
    return out


def detection_world(dets: DetectionArrays, det_frames: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = det_frames[:, 2] + dets.phi
    return det_frames[:, 0] + dets.r * np.cos(a), det_frames[:, 1] + dets.r * np.sin(a)


def update_weights(particles: Particles, offsets: np.ndarray, assoc: Association, dets: DetectionArrays,
                   det_frames: np.ndarray, params: SensorModelParams, gain: float = 1.0,
                   floor: float = 1e-3) -> np.ndarray:
    """Multiply each weight by ``floor + gain * max_j Lambda(z_j | particle)`` in place.

    ``offsets[c]:offsets[c+1]`` is the particle slice of storage cell ``c``.
    Particles in cells without candidates are left untouched. Returns the best
    likelihood per particle (0 where no candidate applied).
    """
    best = np.zeros(len(particles))
    if len(assoc.cells) == 0 or len(particles) == 0:
        return best
    _weight_update(particles.x, particles.y, particles.vx, particles.vy, particles.w, offsets,
                   assoc.cells, assoc.ptr, assoc.det,
                   dets.r, dets.phi, dets.rr, dets.sigma_r, dets.sigma_phi, dets.sigma_rr,
                   np.ascontiguousarray(det_frames[:, 0]), np.ascontiguousarray(det_frames[:, 1]),
                   np.ascontiguousarray(det_frames[:, 2]), np.ascontiguousarray(det_frames[:, 3]),
                   np.ascontiguousarray(det_frames[:, 4]),
                   params.delta_r, params.delta_phi, params.delta_rr,
                   np.ascontiguousarray(shift_weight_array(params.k_pos)),
                   np.ascontiguousarray(shift_weight_array(params.k_rr)),
                   params.rho0, params.eta_occ, params.eta_vel, params.normalization == "density",
                   gain, floor, SINGULAR_EPS, best)
    return best


def in_any_fov(px, py, frames: Dict[int, SensorFrame], mounts: Dict[int, SensorMount]) -> np.ndarray:
    inside = np.zeros(np.shape(px), dtype=bool)
    for sid, f in frames.items():
        m = mounts[sid]
        dx, dy = px - f.x, py - f.y
        r = np.hypot(dx, dy)
        az = np.abs(np.arctan2(np.sin(np.arctan2(dy, dx) - f.yaw), np.cos(np.arctan2(dy, dx) - f.yaw)))
        inside |= (r <= m.max_range) & (az <= m.fov_azimuth)
    return inside


def apply_miss_penalty(particles: Particles, cell_has_candidates: np.ndarray, cell_of: np.ndarray,
                       frames, mounts, p_miss: float, miss_speed: float, fov_only: bool = False) -> np.ndarray:
    """Down-weight fast particles in cells that received no detection.

    With ``fov_only`` the penalty is limited to particles inside some sensor
    cone. Returns the weight removed per cell (length ``cell_has_candidates.size``).
    """
    lost = np.zeros(cell_has_candidates.size)
    idx = S.fast_unsupported(particles.vx, particles.vy, np.asarray(cell_of, dtype=np.int64),
                             np.asarray(cell_has_candidates, dtype=bool), miss_speed)
    if idx.size == 0:
        return lost
    if fov_only:
        idx = idx[in_any_fov(particles.x[idx], particles.y[idx], frames, mounts)]
    lost += np.bincount(cell_of[idx], weights=particles.w[idx] * (1.0 - p_miss), minlength=lost.size)
    particles.w[idx] *= p_miss
    return lost


# -- statistics --------------------------------------------------------------------

def cell_statistics(vx, vy, w) -> CellVelocityStats:
    vx, vy, w = (np.asarray(a, dtype=float) for a in (vx, vy, w))
    W = float(w.sum())
    if not W > 0:
        return CellVelocityStats(np.zeros(2), np.zeros((2, 2)), len(w), W, valid=False)
    mx = float(np.dot(w, vx) / W)
    my = float(np.dot(w, vy) / W)
    dx, dy = vx - mx, vy - my
    cxx = float(np.dot(w, dx * dx) / W)
    cyy = float(np.dot(w, dy * dy) / W)
    cxy = float(np.dot(w, dx * dy) / W)
    return CellVelocityStats(np.array([mx, my]), np.array([[cxx, cxy], [cxy, cyy]]), len(w), W)


@dataclass
class GridVelocityStats:
    """Per-storage-slot weighted statistics for the whole velocity window."""

    weight_sum: np.ndarray
    count: np.ndarray
    mean_x: np.ndarray
    mean_y: np.ndarray
    cov_xx: np.ndarray
    cov_xy: np.ndarray
    cov_yy: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return self.weight_sum > 0

    @property
    def speed(self) -> np.ndarray:
        return np.hypot(self.mean_x, self.mean_y)


def grid_statistics(p: Particles, cell_of: np.ndarray, n_cells: int, prior_weight: Optional[np.ndarray] = None,
                    prior_var: float = 0.0) -> GridVelocityStats:
    """Two-pass weighted mean/covariance per cell; invalid cells report zeros.

    ``prior_weight`` adds, per cell, a zero-mean velocity component with
    isotropic variance ``prior_var`` to the particle mixture.
    """
    cell_of = np.asarray(cell_of, dtype=np.int64)
    order, cnt, offsets = S.counting_order(cell_of, n_cells)
    vx, vy, w = p.vx, p.vy, p.w
    if cell_of.size > 1 and np.any(cell_of[1:] < cell_of[:-1]):
        vx, vy, w = vx[order], vy[order], w[order]
    L = np.zeros(n_cells) if prior_weight is None else np.asarray(prior_weight, dtype=float)
    T, mx, my, cxx, cxy, cyy = S.grid_moments(vx, vy, w, offsets, L, float(prior_var))
    return GridVelocityStats(T, cnt, mx, my, cxx, cxy, cyy)


# -- resampling ------------------------------------------------------------------

def target_counts(counts: np.ndarray, weight_sums: np.ndarray, rp: ResampleParams) -> np.ndarray:
    """New particle count per cell from the old count and the average weight."""
    counts = np.asarray(counts)
    n_old = np.maximum(counts, 1)
    w_mean = np.asarray(weight_sums, dtype=float) / n_old
    w_ref = 1.0 / n_old
    g = np.clip(w_mean / w_ref, rp.growth_min, rp.growth_max)
    g = np.where(weight_sums > 0, g, 1.0)
    t = np.clip(np.rint(counts * g), rp.n_min, rp.n_max).astype(np.int64)
    t[counts == 0] = rp.n_min
    if rp.max_total is not None and t.sum() > rp.max_total:
        base = rp.n_min * t.size
        extra = t - rp.n_min
        room = max(rp.max_total - base, 0)
        if extra.sum() > 0:
            t = rp.n_min + np.floor(extra * (room / extra.sum())).astype(np.int64)
    return t


def systematic_indices(cum_norm: np.ndarray, cell_start: np.ndarray, cell_count: np.ndarray,
                       targets: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Systematic draws for many cells at once.

    ``cum_norm`` is the running sum of per-cell normalised weights over the
    cell-sorted store, so cell number ``k`` (in order) occupies ``(k, k + 1]``.
    """
    u0 = rng.random(targets.size)
    return S.systematic_walk(np.asarray(cum_norm, dtype=float), np.asarray(cell_start, dtype=np.int64),
                             np.asarray(cell_count, dtype=np.int64), np.asarray(targets, dtype=np.int64), u0)


def resample_cell(p: Particles, rp: ResampleParams, rng: np.random.Generator,
                  n_target: Optional[int] = None) -> Particles:
    """Resample one cell's particles; output weights are uniform ``1 / n'``."""
    n = len(p)
    if n == 0:
        raise ValueError("cannot resample an empty cell")
    if n_target is None:
        n_target = int(target_counts(np.array([n]), np.array([p.w.sum()]), rp)[0])
    w = p.w
    W = w.sum()
    wn = w / W if W > 0 else np.full(n, 1.0 / n)
    cum = np.cumsum(wn)
    cum[-1] = 1.0
    idx = systematic_indices(cum, np.array([0]), np.array([n]), np.array([n_target]), rng)
    out = p.take(idx)
    out.w = np.full(n_target, 1.0 / n_target)
    return out


def init_cell_particles(cell_lo: Tuple[float, float], cell_size: float, n: int, speed_range: float,
                        rng: np.random.Generator) -> Particles:
    """``n`` particles uniform in the cell with velocities uniform in a disk."""
    return init_particles_in_cells(np.array([cell_lo[0]]), np.array([cell_lo[1]]), cell_size,
                                   np.array([n]), speed_range, rng)


def init_particles_in_cells(lo_x, lo_y, cell_size, counts, speed_range, rng) -> Particles:
    counts = np.asarray(counts, dtype=np.int64)
    total = int(counts.sum())
    x = np.repeat(lo_x, counts) + rng.random(total) * cell_size
    y = np.repeat(lo_y, counts) + rng.random(total) * cell_size
    rad = speed_range * np.sqrt(rng.random(total))
    ang = rng.random(total) * 2.0 * np.pi
    w = np.repeat(1.0 / np.maximum(counts, 1), counts)
    return Particles(x, y, rad * np.cos(ang), rad * np.sin(ang), w, np.zeros(total, dtype=bool))


# -- hypotheses manager ------------------------------------------------------------

def compensated_range_rate(dets: DetectionArrays, det_frames: np.ndarray, azimuth_shift=0.0) -> np.ndarray:
    """Range rate with the sensor's own motion removed (world radial speed of the target).

    ``azimuth_shift`` is subtracted from the measured azimuth first, which
    evaluates the compensation under an azimuth alias hypothesis.
    """
    a = det_frames[:, 2] + dets.phi - azimuth_shift
    return dets.rr + np.cos(a) * det_frames[:, 3] + np.sin(a) * det_frames[:, 4]


def is_dynamic(comp_rr, sm: SensorModelParams, v_dyn: float = 1.0) -> np.ndarray:
    """Dynamic unless some alias hypothesis ``l`` explains the return as stationary.

    ``comp_rr`` may carry a trailing axis of azimuth hypotheses; a return is
    stationary if any of them fits.
    """
    comp_rr = np.asarray(comp_rr, dtype=float)
    shifted = comp_rr[..., None] - sm.rr_indices * sm.delta_rr
    resid = np.min(np.abs(shifted), axis=-1)
    if resid.ndim > 1:
        resid = resid.min(axis=-1)
    return resid > v_dyn


def azimuth_hypotheses_rr(dets: DetectionArrays, det_frames: np.ndarray, sm: SensorModelParams) -> np.ndarray:
    """Compensated range rate under every azimuth alias, shape ``(n, 2 k_pos + 1)``."""
    js = np.arange(-sm.k_pos, sm.k_pos + 1)
    return np.column_stack([compensated_range_rate(dets, det_frames, j * sm.delta_phi) for j in js])


def cluster_points(x, y, radius: float) -> np.ndarray:
    """Single-linkage clusters: points closer than ``radius`` share a label."""
    n = len(x)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    pairs = cKDTree(np.column_stack([x, y])).query_pairs(radius, output_type="ndarray")
    g = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n)) if len(pairs) else \
        coo_matrix((n, n))
    _, labels = connected_components(g, directed=False)
    return labels.astype(np.int64)


@dataclass
class SpawnResult:
    cells: np.ndarray
    particles: Particles
    cell_of: np.ndarray
    n_clusters: int = 0


def hypotheses_manager(dets: DetectionArrays, det_frames: np.ndarray, ring: RingWindow,
                       sm: SensorModelParams, vp: VelocityParams, rng: np.random.Generator) -> SpawnResult:
    """Spawn fast particles from clusters of dynamic detections.

    Dynamic detections (no range-rate or azimuth alias brings the
    ego-compensated range rate within ``v_dyn`` of zero) are clustered per
    sensor. Every velocity cell within ``spawn_radius`` of a cluster member
    receives ``spawn_per_cell`` particles whose radial speed is the cluster's
    mean compensated range rate minus an alias ``l * delta_rr`` (``l`` drawn
    with the binomial shift weights) and whose cross-radial speed is uniform in
    ``+-v_cross``.
    """
    empty = SpawnResult(np.zeros(0, dtype=np.int64), Particles.empty(), np.zeros(0, dtype=np.int64))
    if len(dets) == 0:
        return empty
    comp = compensated_range_rate(dets, det_frames)
    dyn = is_dynamic(azimuth_hypotheses_rr(dets, det_frames, sm), sm, vp.v_dyn)
    if not np.any(dyn):
        return empty
    wx, wy = detection_world(dets, det_frames)
    cs = ring.spec.cell_size
    h = int(math.ceil(vp.spawn_radius / cs)) + 1
    off = np.arange(-h, h + 1)
    ox, oy = [a.ravel() for a in np.meshgrid(off, off, indexing="ij")]
    claimed: Dict[int, Tuple[float, float, float, float]] = {}
    n_clusters = 0
    for sid in np.unique(dets.sensor_id[dyn]):
        sel = np.flatnonzero(dyn & (dets.sensor_id == sid))
        labels = cluster_points(wx[sel], wy[sel], vp.cluster_radius)
        for lab in range(labels.max() + 1):
            members = sel[labels == lab]
            n_clusters += 1
            mean_rr = float(comp[members].mean())
            sigma = float(dets.sigma_rr[members].mean())
            f = det_frames[members[0]]
            gx = np.floor(wx[members] / cs).astype(np.int64)
            gy = np.floor(wy[members] / cs).astype(np.int64)
            cgx = (gx[:, None] + ox[None, :]).ravel()
            cgy = (gy[:, None] + oy[None, :]).ravel()
            mx = np.repeat(wx[members], ox.size)
            my = np.repeat(wy[members], ox.size)
            near = np.hypot((cgx + 0.5) * cs - mx, (cgy + 0.5) * cs - my) <= vp.spawn_radius + 0.5 * cs * math.sqrt(2)
            inside = (cgx >= ring.gx0) & (cgx < ring.gx0 + ring.nx) & (cgy >= ring.gy0) & (cgy < ring.gy0 + ring.ny)
            for c in np.unique(ring.storage(cgx[near & inside], cgy[near & inside])):
                claimed.setdefault(int(c), (mean_rr, sigma, f[0], f[1]))
    if not claimed:
        return SpawnResult(np.zeros(0, dtype=np.int64), Particles.empty(), np.zeros(0, dtype=np.int64), n_clusters)
    cells = np.array(sorted(claimed), dtype=np.int64)
    info = np.array([claimed[int(c)] for c in cells])
    s = vp.spawn_per_cell
    n = cells.size * s
    cx, cy = ring.center_of_storage(cells)
    x = np.repeat(cx - 0.5 * cs, s) + rng.random(n) * cs
    y = np.repeat(cy - 0.5 * cs, s) + rng.random(n) * cs
    wl = shift_weight_array(sm.k_rr)
    alias = rng.choice(sm.rr_indices, size=n, p=wl)
    radial = np.repeat(info[:, 0], s) - alias * sm.delta_rr + rng.normal(0.0, 1.0, n) * np.repeat(info[:, 1], s)
    cross = rng.uniform(-vp.v_cross, vp.v_cross, n)
    ux, uy = x - np.repeat(info[:, 2], s), y - np.repeat(info[:, 3], s)
    nrm = np.maximum(np.hypot(ux, uy), SINGULAR_EPS)
    ux, uy = ux / nrm, uy / nrm
    vx = radial * ux - cross * uy
    vy = radial * uy + cross * ux
    parts = Particles(x, y, vx, vy, np.zeros(n), np.ones(n, dtype=bool))
    return SpawnResult(cells, parts, np.repeat(cells, s), n_clusters)


# -- the layer ---------------------------------------------------------------------

@dataclass
class VelocityConfig:
    motion: MotionParams = field(default_factory=MotionParams)
    resample: ResampleParams = field(default_factory=ResampleParams)
    params: VelocityParams = field(default_factory=VelocityParams)


class VelocityLayer:
    """Cell-sorted particle store over a ring-buffered velocity window."""

    def __init__(self, spec: GridSpec, cfg: VelocityConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.ring = RingWindow(spec)
        n = self.ring.n_cells
        cells = np.arange(n)
        self.particles = self._init_cells(cells, np.full(n, cfg.resample.n_min))
        self.cell_of = np.repeat(cells, cfg.resample.n_min)
        self._sort()
        self.stats: Optional[GridVelocityStats] = None
        # weight removed by the miss penalty in the current cycle, per cell
        self.lost = np.zeros(n)

    @property
    def spec(self) -> GridSpec:
        return self.ring.spec

    def _init_cells(self, cells, counts) -> Particles:
        cx, cy = self.ring.center_of_storage(cells)
        cs = self.ring.spec.cell_size
        return init_particles_in_cells(cx - 0.5 * cs, cy - 0.5 * cs, cs, counts,
                                       self.cfg.params.speed_range, self.rng)

    def _sort(self) -> None:
        self.cell_of = np.asarray(self.cell_of, dtype=np.int64)
        order, self.counts, self.offsets = S.counting_order(self.cell_of, self.ring.n_cells)
        self.particles = self.particles.take(order)
        self.cell_of = self.cell_of[order]

    def _rebin(self) -> None:
        cell = self.ring.storage_of_world(self.particles.x, self.particles.y)
        keep = cell >= 0
        if not np.all(keep):
            self.particles = self.particles.take(keep)
            cell = cell[keep]
        self.cell_of = cell
        self._sort()

    def predict(self, dt: float) -> Particles:
        """Propagate, re-bin, and return the pre-prediction store (aligned with ``moved``)."""
        before = self.particles
        mp = MotionParams(self.cfg.motion.sigma_pos, self.cfg.motion.sigma_vel, dt)
        self.particles = predict_particles(before, mp, self.rng)
        self.moved = self.particles
        self._rebin()
        return before

    def update(self, dets: DetectionArrays, det_frames: np.ndarray, sm: SensorModelParams,
               frames: Dict[int, SensorFrame], mounts: Dict[int, SensorMount]) -> Dict[str, int]:
        vp = self.cfg.params
        has = np.zeros(self.ring.n_cells, dtype=bool)
        n_assoc = 0
        if len(dets):
            wx, wy = detection_world(dets, det_frames)
            assoc = associate_measurements(self.ring, wx, wy, dets.sensor_id, vp.n_closest, vp.gate_radius)
            update_weights(self.particles, self.offsets, assoc, dets, det_frames, sm,
                           vp.likelihood_gain, vp.lambda_floor)
            has[assoc.cells] = True
            n_assoc = len(assoc.cells)
        self.lost = apply_miss_penalty(self.particles, has, self.cell_of, frames, mounts, vp.p_miss, vp.miss_speed,
                                       vp.miss_scope == "fov")
        return {"candidate_cells": n_assoc, "missed": int(np.count_nonzero(self.lost))}

    def statistics(self) -> GridVelocityStats:
        """Cell estimates after the weight update.

        Weight removed by the miss penalty counts as the slow initial
        distribution (zero mean, variance ``speed_range**2 / 4`` per axis),
        which is what resampling will draw it as.
        """
        lost = self.lost if self.lost.size == self.ring.n_cells else None
        r = self.cfg.params.speed_range
        self.stats = grid_statistics(self.particles, self.cell_of, self.ring.n_cells, lost, r * r / 4.0)
        return self.stats

    def resample(self) -> None:
        """Resample every cell to its target count.

        Weight a cell lost to the miss penalty is not redistributed over the
        survivors: that share of the new particles is drawn afresh from the
        slow initial distribution, so unsupported fast hypotheses die out.
        """
        rp = self.cfg.resample
        n = self.ring.n_cells
        counts = self.counts
        W = np.bincount(self.cell_of, weights=self.particles.w, minlength=n)
        targets = target_counts(counts, W, rp)
        lost = self.lost if self.lost.size == n else np.zeros(n)
        total = W + lost
        reborn = np.where(total > 0, np.rint(targets * lost / np.where(total > 0, total, 1.0)), 0).astype(np.int64)
        reborn[counts == 0] = 0
        drawn = targets - reborn
        drawn[counts == 0] = 0
        occupied = np.flatnonzero(counts > 0)
        w = self.particles.w
        Wc = W[self.cell_of]
        wn = np.where(Wc > 0, w / np.where(Wc > 0, Wc, 1.0), 1.0 / counts[self.cell_of])
        idx = systematic_indices(np.cumsum(wn), self.offsets[occupied], counts[occupied], drawn[occupied], self.rng)
        fresh = np.where(counts == 0, targets, reborn)
        fresh_cells = np.flatnonzero(fresh)
        born = self._init_cells(fresh_cells, fresh[fresh_cells])
        # each cell takes its resampled survivors followed by its fresh draws
        order = S.interleave_cells(n, drawn, idx, fresh, len(self.particles) + np.arange(len(born)))
        self.particles = Particles.concat([self.particles, born]).take(order)
        self.particles.w = np.repeat(1.0 / targets, targets)
        self.cell_of = np.repeat(np.arange(n), targets)
        self.counts = targets
        self.offsets = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(targets, out=self.offsets[1:])
        self.lost = np.zeros(n)

    def spawn(self, result: SpawnResult) -> int:
        """Merge spawned particles, keeping every touched cell within ``n_max``.

        Newcomers get ``birth_share`` of the cell's unit weight; survivors
        share the rest, so a cell that already tracks the object keeps its
        estimate.
        """
        if result.cells.size == 0:
            return 0
        rp = self.cfg.resample
        s_per = np.bincount(result.cell_of, minlength=self.ring.n_cells)
        keep_mask = np.ones(len(self.particles), dtype=bool)
        new_parts = []
        new_cells = []
        for c in result.cells:
            s_new = min(int(s_per[c]), rp.n_max)
            lo, hi = self.offsets[c], self.offsets[c + 1]
            n_old = hi - lo
            keep = min(n_old, rp.n_max - s_new)
            if keep < n_old:
                drop = self.rng.permutation(n_old)[keep:]
                keep_mask[lo + drop] = False
            share = self.cfg.params.birth_share if keep > 0 else 1.0
            if keep > 0:
                self.particles.w[lo:hi] = (1.0 - share) / keep
            sel = np.flatnonzero(result.cell_of == c)[:s_new]
            sp = result.particles.take(sel)
            sp.w = np.full(s_new, share / s_new)
            new_parts.append(sp)
            new_cells.append(np.full(s_new, c, dtype=np.int64))
        self.particles = Particles.concat([self.particles.take(keep_mask)] + new_parts)
        self.cell_of = np.concatenate([self.cell_of[keep_mask]] + new_cells)
        self._sort()
        return int(sum(len(p) for p in new_parts))

    def scroll_to(self, spec: GridSpec) -> int:
        """Move the window; particles leaving it are dropped and new cells seeded."""
        ring, rows, cols = self.ring.moved_to(spec)
        if rows.size == 0 and cols.size == 0:
            self.ring = ring
            return 0
        self.ring = ring
        self._rebin()
        new = np.flatnonzero(self.counts == 0)
        if new.size:
            p = self._init_cells(new, np.full(new.size, self.cfg.resample.n_min))
            self.particles = Particles.concat([self.particles, p])
            self.cell_of = np.concatenate([self.cell_of, np.repeat(new, self.cfg.resample.n_min)])
            self._sort()
        return int(new.size)

    def total_particles(self) -> int:
        return len(self.particles)
