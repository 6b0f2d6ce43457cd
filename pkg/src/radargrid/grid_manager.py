"""Owns both layers and runs one full cycle per scan."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .config import EngineConfig
from .core import DetectionArrays, EgoPose, GridSpec, SensorFrame, sensor_frame
from .occupancy_layer import OccupancyGrid
from .velocity_layer import (GridVelocityStats, VelocityLayer, detection_frames, emit_mass_transfers,
                             hypotheses_manager)

PHASES = ("scroll", "decay", "predict", "transfer", "occupancy", "weights", "statistics", "resample", "spawn")


@dataclass
class CycleReport:
    cycle: int
    timestamp: float
    timings_ms: Dict[str, float] = field(default_factory=dict)
    particles: int = 0
    transfers: int = 0
    moved_evidence: float = 0.0
    spawned: int = 0
    detections: int = 0
    scrolled: bool = False

    @property
    def total_ms(self) -> float:
        return sum(self.timings_ms.values())

    def row(self) -> List:
        """Deterministic counters of the cycle."""
        return [self.cycle, self.timestamp, self.particles, self.transfers, self.spawned, self.detections]

    @staticmethod
    def header() -> List[str]:
        return ["cycle", "timestamp", "particles", "transfers", "spawned", "detections"]

    def timing_row(self) -> List:
        return ([self.cycle, self.timestamp] + [round(self.timings_ms.get(p, 0.0), 4) for p in PHASES]
                + [round(self.total_ms, 4)])

    @staticmethod
    def timing_header() -> List[str]:
        return ["cycle", "timestamp"] + [f"{p}_ms" for p in PHASES] + ["total_ms"]


class _Timer:
    def __init__(self, out: Dict[str, float]):
        self.out = out

    def __call__(self, name):
        self.name = name
        return self

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.out[self.name] = self.out.get(self.name, 0.0) + 1e3 * (time.perf_counter() - self.t0)


class UnifyState:
    """Occupancy grid, velocity grid and the scroll anchor of one run.

    ``mode`` selects which layers run: ``"full"``, ``"occupancy"`` or ``"velocity"``.
    """

    def __init__(self, cfg: EngineConfig, first_pose: Optional[EgoPose] = None,
                 rng: Optional[np.random.Generator] = None):
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        x, y = (first_pose.x, first_pose.y) if first_pose is not None else (0.0, 0.0)
        self.anchor = np.array([x, y])
        occ_spec = cfg.grid.occupancy.window_around(x, y)
        vel_spec = cfg.grid.velocity.window_around(x, y)
        self.mounts = {m.sensor_id: m for m in cfg.mounts}
        self.occupancy = OccupancyGrid(occ_spec, cfg.occupancy.representation, cfg.occupancy.l_max,
                                       cfg.occupancy.footprint, cfg.occupancy.fusion) \
            if cfg.mode != "velocity" else None
        self.velocity = VelocityLayer(vel_spec, cfg.velocity, self.rng) if cfg.mode != "occupancy" else None
        self.cycle = 0
        self.last_time: Optional[float] = None
        self.stats: Optional[GridVelocityStats] = None

    @property
    def scroll_threshold(self) -> float:
        t = self.cfg.grid.scroll_threshold
        return self.cfg.grid.occupancy.cell_size if t is None else t

    def frames(self, pose: EgoPose) -> Dict[int, SensorFrame]:
        return {sid: sensor_frame(m, pose) for sid, m in self.mounts.items()}

    def maybe_scroll(self, pose: EgoPose) -> bool:
        """Re-centre both windows on the SP once it has moved past the threshold."""
        if np.hypot(pose.x - self.anchor[0], pose.y - self.anchor[1]) <= self.scroll_threshold:
            return False
        self.anchor = np.array([pose.x, pose.y])
        if self.occupancy is not None:
            self.occupancy.scroll_to(self.cfg.grid.occupancy.window_around(pose.x, pose.y))
        if self.velocity is not None:
            self.velocity.scroll_to(self.cfg.grid.velocity.window_around(pose.x, pose.y))
        return True

    def step(self, pose: EgoPose, scan: DetectionArrays) -> CycleReport:
        if self.last_time is not None and pose.timestamp < self.last_time:
            raise ValueError(f"timestamp {pose.timestamp} precedes previous scan at {self.last_time}")
        dt = None if self.last_time is None else pose.timestamp - self.last_time
        unknown = set(np.unique(scan.sensor_id).tolist()) - set(self.mounts)
        if unknown:
            raise ValueError(f"detections reference unknown sensor ids {sorted(unknown)}")
        rep = CycleReport(self.cycle, pose.timestamp, detections=len(scan))
        tm = _Timer(rep.timings_ms)
        frames = self.frames(pose)
        occ, vel = self.occupancy, self.velocity
        sm = self.cfg.sensor_model

        with tm("scroll"):
            rep.scrolled = self.maybe_scroll(pose)
        with tm("decay"):
            if occ is not None:
                occ.predict_decay(self.cfg.occupancy.decay)
        src = dst = frac = None
        with tm("predict"):
            if vel is not None and dt is not None and dt > 0:
                before = vel.predict(dt)
                if occ is not None:
                    src, dst, frac = emit_mass_transfers(before, vel.moved, occ.ring,
                                                         self.cfg.velocity.params.transfer_gain)
        with tm("transfer"):
            if src is not None and src.size:
                rep.transfers = int(src.size)
                rep.moved_evidence = occ.apply_mass_transfer(src, dst, frac)
        with tm("occupancy"):
            if occ is not None:
                for sid in np.unique(scan.sensor_id):
                    occ.update_sensor(scan.select(scan.sensor_id == sid), frames[int(sid)], sm)
        det_frames = detection_frames(scan, frames)
        with tm("weights"):
            if vel is not None:
                vel.update(scan, det_frames, sm, frames, self.mounts)
        with tm("statistics"):
            if vel is not None:
                self.stats = vel.statistics()
        with tm("resample"):
            if vel is not None:
                vel.resample()
        with tm("spawn"):
            if vel is not None:
                spawn = hypotheses_manager(scan, det_frames, vel.ring, sm, self.cfg.velocity.params, self.rng)
                rep.spawned = vel.spawn(spawn)
        rep.particles = vel.total_particles() if vel is not None else 0
        self.last_time = pose.timestamp
        self.cycle += 1
        return rep

    # -- snapshot views --------------------------------------------------------

    def occupancy_probability(self) -> Optional[np.ndarray]:
        return None if self.occupancy is None else self.occupancy.probability()

    def velocity_window(self):
        """Window-ordered (mean_x, mean_y, weight_sum, count) arrays of the latest statistics.

        These are the estimates of the last cycle, taken after the weight
        update and before resampling and spawning.
        """
        if self.velocity is None:
            return None
        st = self.stats if self.stats is not None else self.velocity.statistics()
        ring = self.velocity.ring
        return tuple(ring.window_view(a.astype(float)) for a in (st.mean_x, st.mean_y, st.weight_sum, st.count))
