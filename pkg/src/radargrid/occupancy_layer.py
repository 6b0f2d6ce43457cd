"""Static occupancy layer: Binary Bayes log-odds or Dempster-Shafer masses per cell."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import _kernels as K
from .core import DetectionArrays, GridSpec, RingWindow, SensorFrame, SensorModelParams
from .sensor_models import shift_weight_array

L_MAX = 12.0
P_CLIP = 1e-6


@dataclass(frozen=True)
class OccupancyCellBB:
    log_odds: float = 0.0


@dataclass(frozen=True)
class OccupancyCellDS:
    m_occ: float = 0.0
    m_free: float = 0.0

    @property
    def m_unknown(self) -> float:
        return 1.0 - self.m_occ - self.m_free


def bb_update(cell: OccupancyCellBB, p_meas: float, l_max: float = L_MAX) -> OccupancyCellBB:
    if not 0.0 < p_meas < 1.0:
        raise ValueError(f"p_meas={p_meas} must lie strictly inside (0, 1); clamp it first")
    l = cell.log_odds + math.log(p_meas / (1.0 - p_meas))
    return OccupancyCellBB(min(max(l, -l_max), l_max))


def ds_combine(m_occ, m_free, z_occ, z_free):
    """Dempster's rule on the frame {O, F}; total conflict resets to full ignorance.

    Accepts scalars or arrays.
    """
    m_occ, m_free, z_occ, z_free = (np.asarray(v, dtype=float) for v in (m_occ, m_free, z_occ, z_free))
    conflict = m_occ * z_free + m_free * z_occ
    # rounding can leave 1 - m_O - m_F a hair below zero
    mu = np.maximum(1.0 - m_occ - m_free, 0.0)
    zu = np.maximum(1.0 - z_occ - z_free, 0.0)
    total = conflict >= 1.0 - 1e-15
    norm = np.where(total, 1.0, 1.0 - conflict)
    o = np.where(total, 0.0, (m_occ * z_occ + m_occ * zu + mu * z_occ) / norm)
    f = np.where(total, 0.0, (m_free * z_free + m_free * zu + mu * z_free) / norm)
    if o.ndim == 0:
        return float(o), float(f)
    return o, f


def ds_update(cell: OccupancyCellDS, m_occ: float, m_free: float) -> OccupancyCellDS:
    if m_occ < 0 or m_free < 0 or m_occ + m_free > 1.0 + 1e-12:
        raise ValueError("measurement masses must be >= 0 and sum to at most 1")
    return OccupancyCellDS(*ds_combine(cell.m_occ, cell.m_free, m_occ, m_free))


def predict_decay(cell, alpha: float):
    if not 0.0 < alpha <= 1.0:
        raise ValueError("decay factor must lie in (0, 1]")
    if isinstance(cell, OccupancyCellBB):
        return OccupancyCellBB(alpha * cell.log_odds)
    return OccupancyCellDS(alpha * cell.m_occ, alpha * cell.m_free)


def cell_probability(cell) -> float:
    if isinstance(cell, OccupancyCellBB):
        return 1.0 / (1.0 + math.exp(-cell.log_odds))
    return 0.5 * (1.0 + cell.m_occ - cell.m_free)


class OccupancyGrid:
    """Ring-buffered occupancy layer.

    ``occ`` holds log-odds (BB) or occupied mass (DS); ``free`` holds the free
    mass and stays all-zero in BB mode.
    """

    def __init__(self, spec: GridSpec, representation: str = "bb", l_max: float = L_MAX,
                 footprint: bool = True, fusion: str = "scan"):
        if representation not in ("bb", "ds"):
            raise ValueError("representation must be 'bb' or 'ds'")
        if fusion not in ("scan", "detection"):
            raise ValueError("fusion must be 'scan' or 'detection'")
        self.fusion = fusion
        self.representation = representation
        self.l_max = l_max
        self.footprint = footprint
        self.ring = RingWindow(spec)
        self.occ = np.zeros(self.ring.n_cells)
        self.free = np.zeros(self.ring.n_cells)
        self._stamp = np.zeros(self.ring.n_cells, dtype=np.int64)
        self._token = 1
        self._acc_o = np.zeros(self.ring.n_cells)
        self._acc_f = np.zeros(self.ring.n_cells)
        self._acc_t = np.full(self.ring.n_cells, np.inf)

    @property
    def spec(self) -> GridSpec:
        return self.ring.spec

    @property
    def is_ds(self) -> bool:
        return self.representation == "ds"

    # -- views -------------------------------------------------------------

    def probability(self) -> np.ndarray:
        """Window-ordered occupancy probability."""
        if self.is_ds:
            p = 0.5 * (1.0 + self.occ - self.free)
        else:
            p = 1.0 / (1.0 + np.exp(-self.occ))
        return self.ring.window_view(p)

    def masses(self) -> Tuple[np.ndarray, np.ndarray]:
        if not self.is_ds:
            raise ValueError("masses are only defined for the DS representation")
        return self.ring.window_view(self.occ), self.ring.window_view(self.free)

    def evidence(self) -> np.ndarray:
        """Per-storage-slot occupied evidence moved by mass transfer."""
        return self.occ if self.is_ds else np.maximum(self.occ, 0.0)

    # -- phases ------------------------------------------------------------

    def predict_decay(self, alpha: float) -> None:
        if not 0.0 < alpha <= 1.0:
            raise ValueError("decay factor must lie in (0, 1]")
        if alpha == 1.0:
            return
        self.occ *= alpha
        if self.is_ds:
            self.free *= alpha

    def update_sensor(self, dets: DetectionArrays, frame: SensorFrame, params: SensorModelParams) -> int:
        """Fuse one sensor's detections (all in that sensor's frame). Returns cell updates.

        With ``fusion="scan"`` the detections are first reduced per cell by the
        maximum likelihood, so a cell takes one update per sensor scan.
        """
        if len(dets) == 0:
            return 0
        w1 = np.ascontiguousarray(shift_weight_array(params.k_pos))
        ring = self.ring
        n = K.raster_update(
            self.occ, self.free, self.is_ds, self.l_max, self._stamp, self._token,
            ring.gx0, ring.gy0, ring.nx, ring.ny, ring.spec.cell_size,
            frame.x, frame.y, frame.yaw,
            np.ascontiguousarray(dets.r, dtype=float), np.ascontiguousarray(dets.phi, dtype=float),
            np.ascontiguousarray(dets.sigma_r, dtype=float), np.ascontiguousarray(dets.sigma_phi, dtype=float),
            params.delta_r, params.delta_phi, w1, params.rho0, params.gamma,
            params.eta_occ, params.eta_free, params.normalization == "density", P_CLIP, self.footprint,
            params.free_gate == "target", self.fusion == "scan", self._acc_o, self._acc_f, self._acc_t,
            K.raster_stripes())
        self._token += len(dets)
        return int(n)

    def apply_mass_transfer(self, src, dst, fraction) -> float:
        """Move ``fraction`` of each source slot's occupied evidence to ``dst``.

        Deltas are accumulated first and applied in one step. Arrivals that
        would overflow a destination (m_O > 1, or log-odds > l_max) are scaled
        down together with their source debits, so the grid total is conserved.
        Returns the amount of evidence moved.
        """
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        frac = np.asarray(fraction, dtype=float)
        if src.size == 0:
            return 0.0
        if np.any(frac < 0) or np.any(frac > 1):
            raise ValueError("transfer fractions must lie in [0, 1]")
        n = self.ring.n_cells
        per_src = np.bincount(src, weights=frac, minlength=n)
        if np.any(per_src > 1.0 + 1e-12):
            raise ValueError("transfer fractions from one source cell sum to more than 1")
        mass = self.evidence()
        moved = frac * mass[src]
        incoming = np.bincount(dst, weights=moved, minlength=n)
        cap = (1.0 - self.occ) if self.is_ds else (self.l_max - self.occ)
        cap = np.maximum(cap, 0.0)
        over = incoming > cap
        if np.any(over):
            scale = np.ones(n)
            scale[over] = cap[over] / incoming[over]
            moved = moved * scale[dst]
            incoming = np.bincount(dst, weights=moved, minlength=n)
        outgoing = np.bincount(src, weights=moved, minlength=n)
        self.occ += incoming - outgoing
        if self.is_ds:
            np.clip(self.occ, 0.0, 1.0, out=self.occ)
            # arriving occupied mass displaces conflicting free mass
            np.minimum(self.free, 1.0 - self.occ, out=self.free)
        return float(moved.sum())

    def scroll_to(self, spec: GridSpec) -> None:
        """Move the window; dropped cells are re-initialised to unknown."""
        ring, rows, cols = self.ring.moved_to(spec)
        occ = self.occ.reshape(ring.nx, ring.ny)
        free = self.free.reshape(ring.nx, ring.ny)
        occ[rows, :] = 0.0
        occ[:, cols] = 0.0
        free[rows, :] = 0.0
        free[:, cols] = 0.0
        self.ring = ring
