"""Command-line entry points: simulate, run, surface, render."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import render
from .config import ConfigError, EngineConfig, build, load_config
from .core import Detection, GridSpec, SensorModelParams
from .grid_manager import CycleReport, UnifyState
from .io import (LogError, bundled_scenario_path, load_scenario, read_scan_log, read_sidecar, save_snapshot,
                 velocity_stats_rows, write_csv, write_scan_log, write_sidecar)
from .metrics import object_velocity_error, roc_auc
from .radar_sim import occupied_mask
from .sensor_models import position_surface, velocity_surface

log = logging.getLogger("radargrid")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3


class InputError(Exception):
    pass


def _scenario_path(arg: str) -> Path:
    p = Path(arg)
    if p.exists():
        return p
    try:
        return bundled_scenario_path(arg)
    except FileNotFoundError:
        raise InputError(f"scenario {arg!r} is neither a file nor a bundled scenario") from None


def cmd_simulate(args) -> int:
    scenario, raw = load_scenario(_scenario_path(args.scenario))
    seed = scenario.seed if args.seed is None else args.seed
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = write_scan_log(out, scenario.run(seed))
    write_sidecar(out, raw, seed)
    log.info("wrote %d scans to %s", n, out)
    return EXIT_OK


def _engine_config(args, scenario) -> EngineConfig:
    if args.config:
        cfg = load_config(args.config)
    elif scenario is not None and scenario.engine:
        cfg = build(EngineConfig, scenario.engine)
    else:
        cfg = EngineConfig()
    changes = {}
    if args.representation:
        changes["occupancy"] = dataclasses.replace(cfg.occupancy, representation=args.representation)
    if args.mode:
        changes["mode"] = args.mode
    if args.seed is not None:
        changes["seed"] = args.seed
    return dataclasses.replace(cfg, **changes) if changes else cfg


def cmd_run(args) -> int:
    scans = read_scan_log(args.log)
    scenario = read_sidecar(args.log)
    cfg = _engine_config(args, scenario)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    state: Optional[UnifyState] = None
    for i, (pose, dets) in enumerate(scans):
        if state is None:
            state = UnifyState(cfg, pose)
        reports.append(state.step(pose, dets))
        if args.snapshot_every and (i + 1) % args.snapshot_every == 0:
            save_snapshot(out / f"snapshot_{i + 1:04d}.npz", state)
    write_csv(out / "cycles.csv", CycleReport.header(), [r.row() for r in reports])
    # wall-clock timings live apart so every other output is reproducible byte for byte
    write_csv(out / "timings.csv", CycleReport.timing_header(), [r.timing_row() for r in reports])
    metrics = []
    if state is not None:
        save_snapshot(out / "final.npz", state)
        if state.occupancy is not None:
            prob = state.occupancy_probability()
            np.save(out / "occupancy.npy", prob)
            if state.occupancy.is_ds:
                m_o, m_f = state.occupancy.masses()
                np.save(out / "m_occ.npy", m_o)
                np.save(out / "m_free.npy", m_f)
            if scenario is not None:
                truth = occupied_mask(scenario.world, scans[-1][0].timestamp, state.occupancy.spec)
                metrics.append(["occupancy_auc", "", roc_auc(prob, truth)])
        if state.velocity is not None:
            write_csv(out / "velocity_stats.csv", ["cell", "mean_x", "mean_y", "trace_cov", "count", "weight_sum"],
                      velocity_stats_rows(state))
            if scenario is not None:
                mx, my, w, _ = state.velocity_window()
                for k, box in enumerate(scenario.world.boxes):
                    if box.vx == 0 and box.vy == 0:
                        continue
                    err = object_velocity_error(box, scans[-1][0].timestamp, state.velocity.spec, mx, my, w)
                    if err is not None:
                        metrics.append(["velocity_rmse", f"object{k}", err["rmse"]])
                        metrics.append(["speed_error", f"object{k}", err["speed_error"]])
    write_csv(out / "metrics.csv", ["metric", "subject", "value"], metrics)
    if state is not None and not args.no_render:
        _render_snapshot(out / "final.npz", out / "final")
        render.figure_timings(out / "cycle_times.png", CycleReport.timing_header(),
                              [r.timing_row() for r in reports])
    log.info("ran %d cycles into %s", len(reports), out)
    return EXIT_OK


def _render_snapshot(npz_path, stem) -> list:
    with np.load(npz_path) as z:
        snap = {k: z[k] for k in z.files}
    stem = Path(stem)
    written = []
    if "occ_prob" in snap:
        written += render.write_occupancy_images(stem, snap["occ_prob"], snap.get("m_occ"), snap.get("m_free"))
    png = stem.with_suffix(".png")
    render.figure_snapshot(png, snap)
    return written + [png]


def cmd_render(args) -> int:
    src = Path(args.snapshot)
    if not src.exists():
        raise InputError(f"snapshot {src} does not exist")
    stem = Path(args.output) if args.output else src.with_suffix("")
    for p in _render_snapshot(src, stem):
        log.info("wrote %s", p)
    return EXIT_OK


def cmd_surface(args) -> int:
    params = SensorModelParams(delta_r=args.delta_r, delta_phi=args.delta_phi, delta_rr=args.delta_rr,
                               k_pos=args.k, k_rr=args.k_rr, rho0=args.rho0, gamma=args.gamma,
                               eta_occ=args.eta_occ, eta_free=args.eta_free, normalization=args.normalization,
                               free_gate=args.free_gate)
    z = Detection(0, 0.0, args.r, args.phi, args.rr, args.sigma_r, args.sigma_phi, args.sigma_rr)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.model in ("occ", "free"):
        reach = z.r + params.k_pos * params.delta_r + 10.0
        half = math.ceil(reach * math.sin(min(abs(z.phi) + params.k_pos * params.delta_phi + 0.1, math.pi / 2)))
        spec = GridSpec(args.cell, extent_forward=args.cell * math.ceil(reach / args.cell), extent_backward=args.cell,
                        extent_lateral=args.cell * math.ceil(half / args.cell))
        spec = spec.window_around(0.0, 0.0)
        vals = position_surface(args.model, z, params, spec)
        nx, ny = spec.shape
        extent = (spec.origin[0], spec.origin[0] + nx * spec.cell_size, spec.origin[1], spec.origin[1] + ny * spec.cell_size)
        labels = ("x [m]", "y [m]")
    else:
        v = np.arange(-args.vmax, args.vmax + 1e-9, args.vstep)
        vals = velocity_surface(z, params, v, v)
        extent = (v[0], v[-1], v[0], v[-1])
        labels = ("vx [m/s]", "vy [m/s]")
    np.save(out.with_suffix(".npy"), vals)
    render.write_pgm(out.with_suffix(".pgm"), render.scale_gray(vals.T[::-1]))
    if not args.no_render:
        render.figure_surface(out.with_suffix(".png"), vals, extent, *labels,
                              f"{args.model} likelihood, z=({args.r:g}, {args.phi:g}, {args.rr:g})")
    log.info("wrote %s.{npy,pgm}", out.with_suffix(""))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="radargrid", description="Dynamic radar occupancy grid engine")
    ap.add_argument("--seed", type=int, default=None, help="override the random seed")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a scenario into a scan log")
    p.add_argument("scenario", help="scenario file or bundled name (static-corridor, crossing-target, urban-mixed)")
    p.add_argument("output", help="scan log to write; truth goes to <output>.truth.json")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="run the grid over a scan log")
    p.add_argument("log")
    p.add_argument("output", help="output directory")
    p.add_argument("--config", help="engine config (YAML)")
    p.add_argument("--representation", choices=("bb", "ds"))
    p.add_argument("--mode", choices=("full", "occupancy", "velocity"))
    p.add_argument("--snapshot-every", type=int, default=0, metavar="N")
    p.add_argument("--no-render", action="store_true", help="skip image and figure output")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("surface", help="evaluate a sensor-model likelihood surface")
    p.add_argument("model", choices=("occ", "free", "vel"))
    p.add_argument("output", help="output stem (.npy, .pgm, .png)")
    p.add_argument("--r", type=float, default=80.0)
    p.add_argument("--phi", type=float, default=0.0)
    p.add_argument("--rr", type=float, default=15.0)
    p.add_argument("--sigma-r", type=float, default=0.3)
    p.add_argument("--sigma-phi", type=float, default=0.01)
    p.add_argument("--sigma-rr", type=float, default=0.2)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--k-rr", type=int, default=1)
    sm = SensorModelParams()
    p.add_argument("--delta-r", type=float, default=sm.delta_r)
    p.add_argument("--delta-phi", type=float, default=sm.delta_phi)
    p.add_argument("--delta-rr", type=float, default=sm.delta_rr)
    p.add_argument("--rho0", type=float, default=sm.rho0)
    p.add_argument("--gamma", type=float, default=sm.gamma)
    p.add_argument("--eta-occ", type=float, default=sm.eta_occ)
    p.add_argument("--eta-free", type=float, default=sm.eta_free)
    p.add_argument("--normalization", choices=("peak", "density"), default=sm.normalization)
    p.add_argument("--free-gate", choices=("target", "term"), default=sm.free_gate)
    p.add_argument("--cell", type=float, default=0.5)
    p.add_argument("--vmax", type=float, default=40.0)
    p.add_argument("--vstep", type=float, default=0.25)
    p.add_argument("--no-render", action="store_true")
    p.set_defaults(func=cmd_surface)

    p = sub.add_parser("render", help="render a saved snapshot")
    p.add_argument("snapshot")
    p.add_argument("--output", help="output stem (defaults to the snapshot name)")
    p.set_defaults(func=cmd_render)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (InputError, ConfigError, LogError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT if args.command in ("surface",) else EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
