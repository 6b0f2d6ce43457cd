import filecmp

import numpy as np
import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st

from radargrid.cli import EXIT_INPUT, EXIT_OK, main
from radargrid.core import DetectionArrays, EgoPose
from radargrid.io import LogError, read_scan_log, write_scan_log

SMALL_SCENARIO = {
    "name": "small-hall", "duration": 1.0, "dt": 0.1, "seed": 4,
    "sim": {"alias_k_pos": 1, "alias_k_rr": 1, "clutter_rate": 0.0},
    "trajectory": {"waypoints": [[0.0, 0.0, 5.0], [10.0, 0.0, 5.0]]},
    "world": {"segments": [[-5.0, 4.25, 15.0, 4.25], [-5.0, -4.25, 15.0, -4.25]]},
    "engine": {"grid": {"occupancy": {"cell_size": 0.5, "extent_forward": 25.0, "extent_backward": 25.0,
                                      "extent_lateral": 25.0},
                        "velocity": {"cell_size": 1.0, "extent_forward": 25.0, "extent_backward": 25.0,
                                     "extent_lateral": 25.0}}},
}


@pytest.fixture
def small_log(tmp_path):
    sc = tmp_path / "small.yaml"
    sc.write_text(yaml.safe_dump(SMALL_SCENARIO))
    log = tmp_path / "small.log"
    assert main(["simulate", str(sc), str(log)]) == EXIT_OK
    return log


finite = st.floats(-1e6, 1e6, allow_nan=False)
positive = st.floats(1e-6, 1e3)


@st.composite
def scans(draw):
    out = []
    t = 0.0
    for _ in range(draw(st.integers(0, 4))):
        t += draw(st.floats(0.0, 1.0))
        pose = EgoPose(draw(finite), draw(finite), draw(st.floats(-3.0, 3.0)), draw(finite), draw(finite), t)
        n = draw(st.integers(0, 5))
        cols = [np.array([draw(st.integers(0, 7)) for _ in range(n)], dtype=np.int64)]
        cols += [np.array([draw(st.floats(0.0, 300.0)) for _ in range(n)])]
        cols += [np.array([draw(finite) for _ in range(n)]) for _ in range(2)]
        cols += [np.array([draw(positive) for _ in range(n)]) for _ in range(3)]
        out.append((pose, DetectionArrays(*cols, np.full(n, t))))
    return out


@given(scans())
def test_log_round_trip_is_exact(tmp_path_factory, records):
    path = tmp_path_factory.mktemp("log") / "scan.log"
    write_scan_log(path, records)
    back = read_scan_log(path)
    assert len(back) == len(records)
    for (p0, d0), (p1, d1) in zip(records, back):
        assert p0 == p1
        for f in ("sensor_id", "r", "phi", "rr", "sigma_r", "sigma_phi", "sigma_rr", "timestamp"):
            np.testing.assert_array_equal(getattr(d0, f), getattr(d1, f))


@pytest.mark.parametrize("body, line", [
    ("0.0,0,0,0,0,0\n0.0,0,10,0,0,0.3,0.01\n", 3),
    ("0.0,0,10,0,0,0.3,0.01,0.2\n", 2),
    ("0.0,0,0,0,0,0\n0.0,0,ten,0,0,0.3,0.01,0.2\n", 3),
    ("1.0,0,0,0,0,0\n0.5,0,0,0,0,0\n", 3),
])
def test_malformed_log_names_line(tmp_path, body, line):
    p = tmp_path / "bad.log"
    p.write_text("# radargrid scan log v1\n" + body)
    with pytest.raises(LogError, match=f":{line}:"):
        read_scan_log(p)


def test_simulate_bundled_corridor(tmp_path):
    log = tmp_path / "corridor.log"
    assert main(["simulate", "static-corridor", str(log)]) == EXIT_OK
    scans_ = read_scan_log(log)
    assert len(scans_) == 20 and all(len(d) >= 1 for _, d in scans_)
    assert log.with_name("corridor.log.truth.json").exists()


def test_simulate_is_deterministic(tmp_path):
    a, b = tmp_path / "a.log", tmp_path / "b.log"
    for p in (a, b):
        assert main(["--seed", "11", "simulate", "crossing-target", str(p)]) == EXIT_OK
    assert filecmp.cmp(a, b, shallow=False)


def test_malformed_scenario_names_key(tmp_path, capsys):
    bad = dict(SMALL_SCENARIO, sim={"clutter_rat": 1.0})
    p = tmp_path / "bad.yaml"
    p.write_text(yaml.safe_dump(bad))
    assert main(["simulate", str(p), str(tmp_path / "x.log")]) == EXIT_INPUT
    assert "clutter_rat" in capsys.readouterr().err


def test_unknown_scenario_is_input_error(tmp_path):
    assert main(["simulate", "no-such-scenario", str(tmp_path / "x.log")]) == EXIT_INPUT


def test_run_empty_log(tmp_path):
    log = tmp_path / "empty.log"
    log.write_text("# radargrid scan log v1\n")
    out = tmp_path / "out"
    assert main(["run", str(log), str(out)]) == EXIT_OK
    assert (out / "cycles.csv").read_text().count("\n") == 1
    assert (out / "metrics.csv").read_text().count("\n") == 1
    assert not (out / "final.npz").exists()


def test_run_bad_log_is_input_error(tmp_path):
    log = tmp_path / "bad.log"
    log.write_text("1,2,3\n")
    assert main(["run", str(log), str(tmp_path / "out")]) == EXIT_INPUT


DETERMINISTIC = ("cycles.csv", "metrics.csv", "velocity_stats.csv", "occupancy.npy", "final.npz")


def test_run_is_reproducible_and_render_is_a_pure_view(small_log, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["--seed", "3", "run", str(small_log), str(a)]) == EXIT_OK
    assert main(["--seed", "3", "run", str(small_log), str(b), "--no-render"]) == EXIT_OK
    for name in DETERMINISTIC:
        assert filecmp.cmp(a / name, b / name, shallow=False), name
    assert (a / "final.png").exists() and (a / "final.pgm").exists() and (a / "cycle_times.png").exists()
    assert not (b / "final.png").exists()
    assert "occupancy_auc" in (a / "metrics.csv").read_text()


def test_mode_occupancy_matches_full_on_static_scene(small_log, tmp_path):
    a, b = tmp_path / "full", tmp_path / "occ"
    assert main(["run", str(small_log), str(a), "--no-render"]) == EXIT_OK
    assert main(["run", str(small_log), str(b), "--no-render", "--mode", "occupancy"]) == EXIT_OK
    assert (a / "occupancy.npy").read_bytes() == (b / "occupancy.npy").read_bytes()
    assert not (b / "velocity_stats.csv").exists()


def test_ds_run_writes_masses(small_log, tmp_path):
    out = tmp_path / "ds"
    assert main(["run", str(small_log), str(out), "--representation", "ds", "--no-render",
                 "--snapshot-every", "5"]) == EXIT_OK
    m_o, m_f = np.load(out / "m_occ.npy"), np.load(out / "m_free.npy")
    assert (m_o + m_f).max() <= 1 + 1e-12
    assert (out / "snapshot_0005.npz").exists() and (out / "snapshot_0010.npz").exists()


def test_render_command(small_log, tmp_path):
    out = tmp_path / "run"
    assert main(["run", str(small_log), str(out), "--representation", "ds", "--no-render"]) == EXIT_OK
    assert main(["render", str(out / "final.npz"), "--output", str(tmp_path / "view")]) == EXIT_OK
    assert (tmp_path / "view.pgm").read_bytes().startswith(b"P5")
    assert (tmp_path / "view_ds.ppm").read_bytes().startswith(b"P6")
    assert (tmp_path / "view.png").exists()
    assert main(["render", str(tmp_path / "missing.npz")]) == EXIT_INPUT


@pytest.mark.parametrize("model", ["occ", "free", "vel"])
def test_surface_command(tmp_path, model):
    stem = tmp_path / model
    assert main(["surface", model, str(stem), "--no-render", "--vstep", "1.0"]) == EXIT_OK
    vals = np.load(stem.with_suffix(".npy"))
    assert vals.ndim == 2 and vals.max() > 0
    assert stem.with_suffix(".pgm").read_bytes().startswith(b"P5")


def test_surface_unknown_model_exits_with_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["surface", "heat", str(tmp_path / "s")])
    assert exc.value.code == 2


def test_surface_invalid_params_is_input_error(tmp_path):
    assert main(["surface", "occ", str(tmp_path / "s"), "--rho0", "1.5"]) == EXIT_INPUT
