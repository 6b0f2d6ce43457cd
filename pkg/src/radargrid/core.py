"""Domain types, frames and grid indexing shared by every layer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from ._store import ring_storage

TWO_PI = 2.0 * math.pi


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]. Works on scalars and arrays."""
    if np.ndim(a) == 0:
        a = float(a)
        return a - TWO_PI * math.ceil((a - math.pi) / TWO_PI)
    a = np.asarray(a, dtype=float)
    return a - TWO_PI * np.ceil((a - math.pi) / TWO_PI)


def rot2(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class EgoPose:
    x: float
    y: float
    heading: float
    vx: float = 0.0
    vy: float = 0.0
    timestamp: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def velocity(self) -> np.ndarray:
        return np.array([self.vx, self.vy])


@dataclass(frozen=True)
class SensorMount:
    sensor_id: int
    offset_x: float = 0.0
    offset_y: float = 0.0
    yaw: float = 0.0
    fov_azimuth: float = math.radians(75.0)
    max_range: float = 100.0

    def __post_init__(self):
        if not self.max_range > 0:
            raise ValueError(f"sensor {self.sensor_id}: max_range must be > 0")
        if not 0 < self.fov_azimuth <= math.pi:
            raise ValueError(f"sensor {self.sensor_id}: fov_azimuth must be in (0, pi]")


@dataclass(frozen=True)
class Detection:
    sensor_id: int
    timestamp: float
    r: float
    phi: float
    rr: float
    sigma_r: float = 0.3
    sigma_phi: float = 0.01
    sigma_rr: float = 0.2

    def __post_init__(self):
        if self.r < 0:
            raise ValueError("detection range must be >= 0")
        if min(self.sigma_r, self.sigma_phi, self.sigma_rr) <= 0:
            raise ValueError("detection noise standard deviations must be > 0")


@dataclass(frozen=True)
class SensorFrame:
    """World-frame pose and velocity of one mounted sensor at one instant."""

    x: float
    y: float
    yaw: float
    vx: float
    vy: float


def sensor_frame(mount: SensorMount, pose: EgoPose) -> SensorFrame:
    # yaw rate is not part of the pose stream, so the lever arm adds no velocity
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    x = pose.x + c * mount.offset_x - s * mount.offset_y
    y = pose.y + s * mount.offset_x + c * mount.offset_y
    return SensorFrame(x, y, wrap_angle(pose.heading + mount.yaw), pose.vx, pose.vy)


def polar_to_world(d: Detection, mount: SensorMount, pose: EgoPose) -> np.ndarray:
    """World-frame Cartesian position of a detection."""
    p_sensor = np.array([d.r * math.cos(d.phi), d.r * math.sin(d.phi)])
    p_sp = np.array([mount.offset_x, mount.offset_y]) + rot2(mount.yaw) @ p_sensor
    return pose.position + rot2(pose.heading) @ p_sp


def polar_to_world_arrays(r, phi, frame: SensorFrame) -> Tuple[np.ndarray, np.ndarray]:
    a = frame.yaw + np.asarray(phi, dtype=float)
    r = np.asarray(r, dtype=float)
    return frame.x + r * np.cos(a), frame.y + r * np.sin(a)


def world_to_polar(px, py, frame: SensorFrame):
    """Range and sensor-frame azimuth of world point(s)."""
    dx = np.asarray(px, dtype=float) - frame.x
    dy = np.asarray(py, dtype=float) - frame.y
    r = np.hypot(dx, dy)
    phi = wrap_angle(np.arctan2(dy, dx) - frame.yaw)
    if np.ndim(r) == 0:
        return float(r), float(phi)
    return r, phi


@dataclass(frozen=True)
class GridSpec:
    """A window of square cells; cell (0, 0) has its lower-left corner at ``origin``.

    The window spans ``extent_backward + extent_forward`` along world x and
    ``2 * extent_lateral`` along world y.
    """

    cell_size: float = 0.5
    extent_forward: float = 75.0
    extent_backward: float = 75.0
    extent_lateral: float = 150.0
    origin: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError("cell_size must be > 0")
        for name in ("extent_forward", "extent_backward", "extent_lateral"):
            v = getattr(self, name)
            n = v / self.cell_size
            if v <= 0 or abs(n - round(n)) > 1e-9 * max(1.0, n):
                raise ValueError(f"{name}={v} is not a positive multiple of cell_size={self.cell_size}")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self) -> Tuple[int, int]:
        nx = int(round((self.extent_backward + self.extent_forward) / self.cell_size))
        ny = int(round(2 * self.extent_lateral / self.cell_size))
        return nx, ny

    @property
    def n_cells(self) -> int:
        nx, ny = self.shape
        return nx * ny

    def origin_index(self) -> Tuple[int, int]:
        """Global integer index of the window's first cell (origins are cell-aligned)."""
        return (int(round(self.origin[0] / self.cell_size)),
                int(round(self.origin[1] / self.cell_size)))

    def window_around(self, x: float, y: float) -> "GridSpec":
        """Same spec with the origin snapped to the cell lattice around (x, y)."""
        gx = math.floor((x - self.extent_backward) / self.cell_size + 0.5)
        gy = math.floor((y - self.extent_lateral) / self.cell_size + 0.5)
        return replace(self, origin=(gx * self.cell_size, gy * self.cell_size))

    def cell_center(self, cell: Tuple[int, int]) -> np.ndarray:
        return np.array([self.origin[0] + (cell[0] + 0.5) * self.cell_size,
                         self.origin[1] + (cell[1] + 0.5) * self.cell_size])

    def cell_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        nx, ny = self.shape
        cx = self.origin[0] + (np.arange(nx) + 0.5) * self.cell_size
        cy = self.origin[1] + (np.arange(ny) + 0.5) * self.cell_size
        return np.meshgrid(cx, cy, indexing="ij")


def world_to_cell(p, spec: GridSpec) -> Optional[Tuple[int, int]]:
    """Half-open floor binning; ``None`` when the point is outside the window."""
    ix = math.floor((p[0] - spec.origin[0]) / spec.cell_size)
    iy = math.floor((p[1] - spec.origin[1]) / spec.cell_size)
    nx, ny = spec.shape
    if 0 <= ix < nx and 0 <= iy < ny:
        return ix, iy
    return None


def world_to_cell_arrays(px, py, spec: GridSpec):
    """Vectorised :func:`world_to_cell`; returns (ix, iy, inside)."""
    ix = np.floor((np.asarray(px) - spec.origin[0]) / spec.cell_size).astype(np.int64)
    iy = np.floor((np.asarray(py) - spec.origin[1]) / spec.cell_size).astype(np.int64)
    nx, ny = spec.shape
    inside = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
    return ix, iy, inside


def cell_center_polar(cell, spec: GridSpec, mount: SensorMount, pose: EgoPose) -> Tuple[float, float]:
    c = spec.cell_center(cell)
    return world_to_polar(c[0], c[1], sensor_frame(mount, pose))


@dataclass(frozen=True)
class SensorModelParams:
    """Ambiguity intervals and scale constants of the inverse sensor models.

    ``normalization="density"`` evaluates each mixture term as a normalised
    Gaussian density; ``"peak"`` uses the unnormalised kernel so that every
    term peaks at 1 and ``eta_*`` is directly the peak likelihood.

    ``free_gate="target"`` keeps free evidence in front of the measured range;
    ``"term"`` gates each range hypothesis separately, so the shorter
    hypotheses also clear cells up to ``k_pos * delta_r`` behind it.
    """

    delta_r: float = 15.0
    delta_phi: float = 0.35
    delta_rr: float = 12.5
    k_pos: int = 1
    k_rr: int = 1
    rho0: float = 0.2
    gamma: float = 0.7
    eta_occ: float = 4.0
    eta_free: float = 0.7
    eta_vel: float = 1.0
    normalization: str = "peak"
    free_gate: str = "target"

    def __post_init__(self):
        if min(self.delta_r, self.delta_phi, self.delta_rr) <= 0:
            raise ValueError("ambiguity intervals must be > 0")
        if self.k_pos < 0 or self.k_rr < 0:
            raise ValueError("index-set bounds must be >= 0")
        if not 0 < self.rho0 < 1:
            raise ValueError("rho0 must lie in (0, 1); |rho| >= 1 gives a singular covariance")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if min(self.eta_occ, self.eta_free, self.eta_vel) <= 0:
            raise ValueError("eta constants must be > 0")
        if self.normalization not in ("peak", "density"):
            raise ValueError("normalization must be 'peak' or 'density'")
        if self.free_gate not in ("target", "term"):
            raise ValueError("free_gate must be 'target' or 'term'")

    @property
    def rr_indices(self) -> np.ndarray:
        return np.arange(-self.k_rr, self.k_rr + 1)


def default_mounts() -> Tuple[SensorMount, ...]:
    """Four corner radars with overlapping cones (front-left/right, rear-left/right)."""
    fov = math.radians(75.0)
    return (
        SensorMount(0, 3.6, 0.8, math.radians(40.0), fov, 100.0),
        SensorMount(1, 3.6, -0.8, math.radians(-40.0), fov, 100.0),
        SensorMount(2, -0.9, 0.8, math.radians(140.0), fov, 100.0),
        SensorMount(3, -0.9, -0.8, math.radians(-140.0), fov, 100.0),
    )


@dataclass
class DetectionArrays:
    """Column view of a scan used by the vectorised layers."""

    sensor_id: np.ndarray
    r: np.ndarray
    phi: np.ndarray
    rr: np.ndarray
    sigma_r: np.ndarray
    sigma_phi: np.ndarray
    sigma_rr: np.ndarray
    timestamp: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def from_detections(cls, dets) -> "DetectionArrays":
        dets = list(dets)
        if not dets:
            e = np.zeros(0)
            return cls(np.zeros(0, dtype=np.int64), e, e, e, e, e, e, e)
        cols = np.array([(d.sensor_id, d.r, d.phi, d.rr, d.sigma_r, d.sigma_phi, d.sigma_rr, d.timestamp)
                         for d in dets], dtype=float)
        return cls(cols[:, 0].astype(np.int64), cols[:, 1], cols[:, 2], cols[:, 3],
                   cols[:, 4], cols[:, 5], cols[:, 6], cols[:, 7])

    def __len__(self) -> int:
        return len(self.r)

    def select(self, mask) -> "DetectionArrays":
        return DetectionArrays(self.sensor_id[mask], self.r[mask], self.phi[mask], self.rr[mask],
                               self.sigma_r[mask], self.sigma_phi[mask], self.sigma_rr[mask],
                               self.timestamp[mask] if len(self.timestamp) else self.timestamp)


class RingWindow:
    """Maps global lattice indices of a scrolling window onto fixed storage.

    Global cell ``(gx, gy)`` lives at storage slot ``(gx mod nx, gy mod ny)``,
    so moving the window never copies retained cells.
    """

    def __init__(self, spec: GridSpec):
        self.spec = spec
        self.nx, self.ny = spec.shape
        self.gx0, self.gy0 = spec.origin_index()

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    def storage(self, gx, gy):
        return (np.asarray(gx) % self.nx) * self.ny + (np.asarray(gy) % self.ny)

    def global_index(self, px, py):
        cs = self.spec.cell_size
        gx = np.floor(np.asarray(px, dtype=float) / cs).astype(np.int64)
        gy = np.floor(np.asarray(py, dtype=float) / cs).astype(np.int64)
        inside = (gx >= self.gx0) & (gx < self.gx0 + self.nx) & (gy >= self.gy0) & (gy < self.gy0 + self.ny)
        return gx, gy, inside

    def storage_of_world(self, px, py):
        """Storage slot of each point, -1 outside the window."""
        px = np.asarray(px, dtype=float)
        py = np.asarray(py, dtype=float)
        if px.ndim == 1 and px.shape == py.shape:
            return ring_storage(px, py, self.spec.cell_size, self.gx0, self.gy0, self.nx, self.ny)
        gx, gy, inside = self.global_index(px, py)
        return np.where(inside, self.storage(gx, gy), -1)

    def global_of_storage(self, s):
        s = np.asarray(s)
        sx, sy = s // self.ny, s % self.ny
        gx = self.gx0 + (sx - self.gx0) % self.nx
        gy = self.gy0 + (sy - self.gy0) % self.ny
        return gx, gy

    def center_of_storage(self, s):
        gx, gy = self.global_of_storage(s)
        cs = self.spec.cell_size
        return (gx + 0.5) * cs, (gy + 0.5) * cs

    def window_view(self, flat: np.ndarray) -> np.ndarray:
        """Storage array rearranged so index [ix, iy] is the window-local cell."""
        a = flat.reshape(self.nx, self.ny)
        return np.roll(a, (-(self.gx0 % self.nx), -(self.gy0 % self.ny)), axis=(0, 1))

    def storage_from_window(self, window: np.ndarray) -> np.ndarray:
        a = np.roll(window, (self.gx0 % self.nx, self.gy0 % self.ny), axis=(0, 1))
        return np.ascontiguousarray(a).reshape(-1)

    def moved_to(self, spec: GridSpec):
        """Storage slots whose global cell leaves the window when moving to ``spec``.

        Returns (new RingWindow, row slots to reset, column slots to reset).
        """
        new = RingWindow(spec)
        if (new.nx, new.ny) != (self.nx, self.ny):
            raise ValueError("window size must stay constant while scrolling")
        rows = _dropped(self.gx0, new.gx0, self.nx)
        cols = _dropped(self.gy0, new.gy0, self.ny)
        return new, rows, cols


def _dropped(old0: int, new0: int, n: int) -> np.ndarray:
    d = new0 - old0
    if d == 0:
        return np.zeros(0, dtype=np.int64)
    if abs(d) >= n:
        return np.arange(n)
    if d > 0:
        g = np.arange(old0, old0 + d)
    else:
        g = np.arange(old0 + n + d, old0 + n)
    return g % n
