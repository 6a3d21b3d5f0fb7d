import json

import numpy as np
import pytest

import main
from backend.errors import ConvergenceError
from backend.results_dao import write_calibration_samples
from backend.wrench import PoseDelta, Wrench, default_stiffness


@pytest.fixture
def config_file(tmp_path, restore_logging):
    def _make(**sections):
        doc = {"paths": {"log_dir": str(tmp_path / "logs")}}
        doc.update(sections)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(doc))
        return str(path)
    return _make


def _run(*argv):
    return main.main([str(a) for a in argv])


def test_pattern_writes_csv_and_svg(tmp_path, config_file):
    out = tmp_path / "out"
    assert _run("pattern", "--config", config_file(), "--out", out) == 0

    rows = (out / "pattern.csv").read_text().splitlines()
    assert rows[0] == "i,j,X_mm,Y_mm,Z_mm,u_px,v_px"
    svg = (out / "pattern.svg").read_text()
    assert svg.count("<circle") == len(rows) - 1 > 0


def test_malformed_config_exits_one_without_output(tmp_path, restore_logging):
    bad = tmp_path / "bad.json"
    bad.write_text("{\n  \"sim\": \n")
    out = tmp_path / "out"
    assert _run("pattern", "--config", bad, "--out", out) == 1
    assert not out.exists()


def test_out_of_range_config_exits_one(tmp_path, config_file):
    assert _run("pattern", "--config", config_file(flow={"window": 4}), "--out", tmp_path / "out") == 1


def test_usage_errors_exit_one(restore_logging):
    assert _run() == 1
    assert _run("process") == 1
    assert _run("pattern", "--log-level", "LOUD") == 1


def test_simulate_is_reproducible_for_a_seed(tmp_path, config_file):
    cfg = config_file(sim={"noise_sigma": 1.0})
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert _run("simulate", "--config", cfg, "--out", a, "--frames", 2, "--seed", 3) == 0
    assert _run("simulate", "--config", cfg, "--out", b, "--frames", 2, "--seed", 3) == 0
    assert _run("simulate", "--config", cfg, "--out", c, "--frames", 2, "--seed", 4) == 0

    for name in ("frame_0000.ppm", "frame_0001.ppm"):
        assert (a / "frames" / name).read_bytes() == (b / "frames" / name).read_bytes()
    assert (a / "frames" / "frame_0001.ppm").read_bytes() != (c / "frames" / "frame_0001.ppm").read_bytes()

    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["frame_count"] == 2
    assert (a / "truth.json").exists() and (a / "markers.csv").exists() and (a / "truth.csv").exists()


def test_simulate_rejects_a_bad_scenario(tmp_path, config_file):
    sc = tmp_path / "scenario.json"
    sc.write_text(json.dumps({"schema_version": 1, "frames": 0}))
    assert _run("simulate", "--config", config_file(), "--out", tmp_path / "out", "--scenario", sc) == 2


def test_simulate_then_process(tmp_path, config_file):
    cfg = config_file()
    sim, out = tmp_path / "sim", tmp_path / "proc"
    scenario = {
        "schema_version": 1,
        "frames": 3,
        "hardness": "hard",
        "indenter": {"shape": "sphere", "radius": 4.5},
        "keyframes": [{"frame": 0}, {"frame": 2, "wrench": [0, 0, 2, 0, 0, 0], "depth": 0.5}],
    }
    (tmp_path / "press.json").write_text(json.dumps(scenario))
    assert _run("simulate", "--config", cfg, "--out", sim, "--scenario", tmp_path / "press.json") == 0
    assert _run("process", "--config", cfg, "--out", out, "--frames", sim / "frames",
                "--overlay", "on", "--heights", "--threads", 2) == 0

    summary = json.loads((out / "summary.json").read_text())
    assert summary["frames"] == 3
    assert summary["records"][-1]["wrench"]["Fz"] == pytest.approx(2.0, rel=0.05)
    assert len((out / "frames.csv").read_text().splitlines()) == 4
    assert (out / "overlays" / "overlay_0002.ppm").exists()
    assert (out / "heights" / "height_0002.pgm").exists()
    assert (out / "heights" / "height_0002.json").exists()

    heights = (out / "heights" / "height_0002.csv").read_text().splitlines()
    assert heights[0] == "row,col,height_mm" and len(heights) > 1

    markers = (out / "markers" / "markers_0000.csv").read_text().splitlines()
    assert markers[0] == "kind,x_px,y_px,area"
    kinds = [row.split(",")[0] for row in markers[1:]]
    assert kinds.count("white") == 4
    assert kinds.count("black") == summary["records"][0]["markers"]["black"]

    flow = (out / "flow" / "flow_0002.csv").read_text().splitlines()
    assert flow[0] == "x0,y0,dx,dy,status"
    assert 0 < len(flow) - 1 <= summary["records"][0]["markers"]["black"]
    assert {row.rsplit(",", 1)[1] for row in flow[1:]} <= {"tracked", "lost"}


def test_process_without_frames_exits_two(tmp_path, config_file):
    assert _run("process", "--config", config_file(), "--out", tmp_path / "out", "--frames", tmp_path / "none") == 2


def test_calibrate_writes_the_fitted_stiffness(tmp_path, config_file, cfg, rng):
    s = default_stiffness(cfg.wrench)
    samples = []
    for d in rng.normal(0.0, 0.1, size=(36, 6)):
        samples.append((PoseDelta(d), Wrench.from_vector(s.matrix @ d)))
    write_calibration_samples(tmp_path / "samples.csv", samples)

    out = tmp_path / "out"
    assert _run("calibrate", "--config", config_file(), "--out", out, "--samples", tmp_path / "samples.csv") == 0
    doc = json.loads((out / "stiffness.json").read_text())
    assert np.allclose(np.reshape(doc["values"], (6, 6)), s.matrix, rtol=1e-9, atol=1e-9)
    assert doc["calibration"]["samples"] == 36


def test_rank_deficient_calibration_exits_two(tmp_path, config_file, cfg, rng):
    s = default_stiffness(cfg.wrench)
    deltas = rng.normal(0.0, 0.1, size=(36, 6))
    deltas[:, 5] = 0.0
    write_calibration_samples(
        tmp_path / "samples.csv",
        [(PoseDelta(d), Wrench.from_vector(s.matrix @ d)) for d in deltas],
    )
    out = tmp_path / "out"
    assert _run("calibrate", "--config", config_file(), "--out", out, "--samples", tmp_path / "samples.csv") == 2
    assert not (out / "stiffness.json").exists()


def test_dataset_then_hardness(tmp_path, config_file):
    cfg = config_file(hardness={"epochs": 10, "learning_rate": 0.05, "frames_per_sequence": 12})
    data, out = tmp_path / "data", tmp_path / "model"
    assert _run("dataset", "--config", cfg, "--out", data, "--sequences", 6, "--seed", 2) == 0
    assert (data / "manifest.json").exists()
    assert (data / "seq_0005.json").exists()

    assert _run("hardness", "--config", cfg, "--out", out, "--manifest", data / "manifest.json") == 0
    model = json.loads((out / "model.json").read_text())
    metrics = json.loads((out / "metrics.json").read_text())
    assert len(model["weights"]) == 3
    assert model["metadata"]["seed"] == 0
    assert set(metrics["test"]) >= {"accuracy", "precision", "recall", "confusion"}


def test_non_convergence_exits_three(tmp_path, config_file, monkeypatch):
    def stuck(cfg, out_dir):
        raise ConvergenceError("did not settle", residual=1.0)

    monkeypatch.setattr(main, "cmd_pattern", stuck)
    assert _run("pattern", "--config", config_file(), "--out", tmp_path / "out") == 3
