"""Scan logs, scenario files, truth sidecars and snapshot/CSV writers."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from .config import ConfigError, _mount, build
from .core import DetectionArrays, EgoPose, default_mounts
from .radar_sim import Box, PointTarget, Scenario, Segment, SimParams, Trajectory, Waypoint, WorldModel

Scan = Tuple[EgoPose, DetectionArrays]

POSE_FIELDS = 6
DET_FIELDS = 8


class LogError(ValueError):
    pass


# -- scan log ------------------------------------------------------------------
# pose line:      timestamp, x, y, heading, vx, vy
# detection line: timestamp, sensor_id, r, phi, rr, sigma_r, sigma_phi, sigma_rr

def format_scan(pose: EgoPose, dets: DetectionArrays) -> List[str]:
    lines = [",".join(repr(float(v)) for v in (pose.timestamp, pose.x, pose.y, pose.heading, pose.vx, pose.vy))]
    for i in range(len(dets)):
        lines.append(",".join([repr(float(pose.timestamp)), str(int(dets.sensor_id[i]))]
                              + [repr(float(a[i])) for a in (dets.r, dets.phi, dets.rr, dets.sigma_r,
                                                             dets.sigma_phi, dets.sigma_rr)]))
    return lines


def write_scan_log(path, scans: Iterable[Scan]) -> int:
    n = 0
    with open(path, "w") as fh:
        fh.write("# radargrid scan log v1\n")
        for pose, dets in scans:
            fh.write("\n".join(format_scan(pose, dets)) + "\n")
            n += 1
    return n


def _finish(pose, rows) -> Scan:
    if not rows:
        return pose, DetectionArrays.from_detections([])
    a = np.array(rows, dtype=float)
    return pose, DetectionArrays(a[:, 1].astype(np.int64), a[:, 2], a[:, 3], a[:, 4], a[:, 5], a[:, 6], a[:, 7],
                                 a[:, 0])


def read_scan_log(path) -> List[Scan]:
    """Parse a scan log; malformed lines raise :class:`LogError` naming the line."""
    scans: List[Scan] = []
    pose: Optional[EgoPose] = None
    rows: List[List[float]] = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise LogError(f"{path}:{lineno}: non-numeric field in {line!r}") from None
            if len(vals) == POSE_FIELDS:
                if pose is not None:
                    scans.append(_finish(pose, rows))
                if scans and vals[0] < scans[-1][0].timestamp:
                    raise LogError(f"{path}:{lineno}: timestamp {vals[0]} is earlier than the previous scan")
                try:
                    pose = EgoPose(vals[1], vals[2], vals[3], vals[4], vals[5], vals[0])
                except ValueError as exc:
                    raise LogError(f"{path}:{lineno}: {exc}") from None
                rows = []
            elif len(vals) == DET_FIELDS:
                if pose is None:
                    raise LogError(f"{path}:{lineno}: detection before any pose line")
                if vals[0] != pose.timestamp:
                    raise LogError(f"{path}:{lineno}: detection timestamp differs from its pose line")
                if vals[2] < 0 or min(vals[5:]) <= 0 or vals[1] != int(vals[1]):
                    raise LogError(f"{path}:{lineno}: invalid detection values")
                rows.append(vals)
            else:
                raise LogError(f"{path}:{lineno}: expected {POSE_FIELDS} or {DET_FIELDS} fields, got {len(vals)}")
    if pose is not None:
        scans.append(_finish(pose, rows))
    return scans


# -- scenarios -----------------------------------------------------------------

def _key_line(text: str, path: Sequence) -> Optional[int]:
    """1-based line of the node at ``path`` inside a YAML document, if found."""
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return None
    for key in path:
        if isinstance(node, yaml.MappingNode):
            match = [(k, v) for k, v in node.value if k.value == key]
            if not match:
                return None
            k, node = match[0]
            if key == path[-1]:
                return k.start_mark.line + 1
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
        else:
            return None
    return node.start_mark.line + 1 if node is not None else None


class _Reader:
    def __init__(self, text: str, source: str):
        self.text = text
        self.source = source

    def fail(self, path: Sequence, msg: str):
        line = _key_line(self.text, path)
        where = f"{self.source}:{line}" if line else self.source
        dotted = ".".join(str(p) for p in path)
        raise ConfigError(f"{where}: {dotted}: {msg}")

    def mapping(self, d, path, allowed) -> Dict[str, Any]:
        if d is None:
            return {}
        if not isinstance(d, dict):
            self.fail(path, "expected a mapping")
        for k in d:
            if k not in allowed:
                self.fail(list(path) + [k], f"unknown key '{k}'")
        return d

    def vec(self, v, path, n=2) -> Tuple[float, ...]:
        if not isinstance(v, (list, tuple)) or len(v) != n:
            self.fail(path, f"expected a list of {n} numbers")
        try:
            return tuple(float(x) for x in v)
        except (TypeError, ValueError):
            self.fail(path, "expected numbers")


def scenario_from_dict(data: Dict[str, Any], text: str = "", source: str = "<scenario>") -> Scenario:
    rd = _Reader(text, source)
    top = rd.mapping(data, [], {"name", "duration", "dt", "seed", "clutter_until", "sim", "mounts",
                                "trajectory", "world", "engine"})
    try:
        sim = build(SimParams, top.get("sim"), "sim")
    except ConfigError as exc:
        key = str(exc).split("'")[1].split(".") if "unknown key" in str(exc) else ["sim"]
        rd.fail(key, str(exc))
    mounts = default_mounts()
    if top.get("mounts") is not None:
        if not isinstance(top["mounts"], list):
            rd.fail(["mounts"], "expected a list")
        try:
            mounts = tuple(_mount(m, f"mounts[{i}]") for i, m in enumerate(top["mounts"]))
        except ConfigError as exc:
            rd.fail(["mounts"], str(exc))
    tr = rd.mapping(top.get("trajectory"), ["trajectory"], {"waypoints", "heading_deg", "yaw_rate_deg"})
    wps = []
    for i, w in enumerate(tr.get("waypoints") or [[0.0, 0.0, 0.0]]):
        p = ["trajectory", "waypoints", i]
        if isinstance(w, dict):
            w = rd.mapping(w, p, {"position", "speed"})
            x, y = rd.vec(w.get("position"), p + ["position"])
            wps.append(Waypoint(x, y, float(w.get("speed", 0.0))))
        else:
            x, y, s = rd.vec(w, p, 3)
            wps.append(Waypoint(x, y, s))
    try:
        traj = Trajectory(tuple(wps), math.radians(float(tr.get("heading_deg", 0.0))),
                          math.radians(float(tr.get("yaw_rate_deg", 0.0))))
    except ValueError as exc:
        rd.fail(["trajectory"], str(exc))
    wd = rd.mapping(top.get("world"), ["world"], {"segments", "boxes", "points"})
    segs, boxes, points = [], [], []
    for i, s in enumerate(wd.get("segments") or []):
        p = ["world", "segments", i]
        refl, occl = 1.0, True
        if isinstance(s, dict):
            s = rd.mapping(s, p, {"start", "end", "reflectivity", "occludes"})
            coords = rd.vec(s.get("start"), p + ["start"]) + rd.vec(s.get("end"), p + ["end"])
            refl = float(s.get("reflectivity", 1.0))
            occl = bool(s.get("occludes", True))
        else:
            coords = rd.vec(s, p, 4)
        try:
            segs.append(Segment(*coords, refl, occl))
        except ValueError as exc:
            rd.fail(p, str(exc))
    for i, b in enumerate(wd.get("boxes") or []):
        p = ["world", "boxes", i]
        b = rd.mapping(b, p, {"center", "size", "heading_deg", "velocity", "reflectivity"})
        cx, cy = rd.vec(b.get("center"), p + ["center"])
        ln, wd_ = rd.vec(b.get("size"), p + ["size"])
        vx, vy = rd.vec(b.get("velocity", [0.0, 0.0]), p + ["velocity"])
        try:
            boxes.append(Box(cx, cy, ln, wd_, math.radians(float(b.get("heading_deg", 0.0))), vx, vy,
                             float(b.get("reflectivity", 1.0))))
        except ValueError as exc:
            rd.fail(p, str(exc))
    for i, q in enumerate(wd.get("points") or []):
        p = ["world", "points", i]
        q = rd.mapping(q, p, {"position", "velocity", "reflectivity"})
        x, y = rd.vec(q.get("position"), p + ["position"])
        vx, vy = rd.vec(q.get("velocity", [0.0, 0.0]), p + ["velocity"])
        points.append(PointTarget(x, y, vx, vy, float(q.get("reflectivity", 1.0))))
    try:
        return Scenario(str(top.get("name", "scenario")), WorldModel(segs, boxes, points, traj), sim, mounts,
                        float(top.get("duration", 2.0)), float(top.get("dt", 0.1)), int(top.get("seed", 0)),
                        None if top.get("clutter_until") is None else float(top["clutter_until"]),
                        top.get("engine"))
    except (TypeError, ValueError) as exc:
        rd.fail([], str(exc))


def load_scenario(path) -> Tuple[Scenario, Dict[str, Any]]:
    """Parse a scenario file; returns the scenario and its raw mapping."""
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return scenario_from_dict(data, text, str(path)), data


def bundled_scenario_path(name: str) -> Path:
    p = Path(__file__).parent / "scenarios" / f"{name}.yaml"
    if not p.exists():
        raise FileNotFoundError(f"no bundled scenario named {name!r}")
    return p


def sidecar_path(log_path) -> Path:
    return Path(str(log_path) + ".truth.json")


def write_sidecar(log_path, raw_scenario: Dict[str, Any], seed: int) -> Path:
    p = sidecar_path(log_path)
    p.write_text(json.dumps({"scenario": raw_scenario, "seed": seed}, indent=1, sort_keys=True))
    return p


def read_sidecar(log_path) -> Optional[Scenario]:
    p = sidecar_path(log_path)
    if not p.exists():
        return None
    return scenario_from_dict(json.loads(p.read_text())["scenario"], source=str(p))


# -- tables and snapshots ------------------------------------------------------------

def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def velocity_stats_rows(state) -> List[List]:
    """Per-cell rows: window cell index, mean_x, mean_y, trace of covariance, count, weight sum."""
    vel = state.velocity
    st = state.stats if state.stats is not None else vel.statistics()
    ring = vel.ring
    view = [ring.window_view(a.astype(float)).ravel() for a in
            (st.mean_x, st.mean_y, st.cov_xx + st.cov_yy, st.count, st.weight_sum)]
    return [[i, view[0][i], view[1][i], view[2][i], int(view[3][i]), view[4][i]]
            for i in np.flatnonzero(view[3] > 0)]


def save_snapshot(path, state, max_particles: int = 20000) -> None:
    """Both layers as raw window-ordered matrices in one ``.npz``."""
    out: Dict[str, Any] = {"cycle": state.cycle}
    if state.occupancy is not None:
        occ = state.occupancy
        out["occ_prob"] = occ.probability()
        out["occ_origin"] = np.array(occ.spec.origin)
        out["occ_cell"] = occ.spec.cell_size
        if occ.is_ds:
            out["m_occ"], out["m_free"] = occ.masses()
    if state.velocity is not None:
        vel = state.velocity
        mx, my, w, n = state.velocity_window()
        out.update(vel_mean_x=mx, vel_mean_y=my, vel_weight=w, vel_count=n,
                   vel_origin=np.array(vel.spec.origin), vel_cell=vel.spec.cell_size)
        p = vel.particles
        step = max(1, len(p) // max_particles)
        out["particles"] = np.column_stack([p.x, p.y, p.vx, p.vy, p.w])[::step]
    np.savez_compressed(path, **out)
