import json

import numpy as np
import pytest

from velocal import io
from velocal.cli import main
from velocal.config import AppConfig, SimulationConfig, TrajectorySpec, dump_config
from velocal.tracking import FeatureTrack


def write_config(path, trajectory: TrajectorySpec) -> str:
    path.write_text(dump_config(AppConfig(simulation=SimulationConfig(trajectory=trajectory))))
    return str(path)


@pytest.fixture(scope="module")
def default_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("default")
    assert main(["simulate", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def short_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("short")
    cfg = write_config(root / "config.json", TrajectorySpec.aggressive(duration=6.0))
    assert main(["simulate", "--config", cfg, "--out", str(root / "data")]) == 0
    return root


def test_simulate_default_row_count(default_dataset):
    lines = (default_dataset / io.IMU_FILE).read_text().splitlines()
    assert len(lines) - 2 == 30 * 200
    assert (default_dataset / io.GROUNDTRUTH_FILE).exists()


def test_simulate_is_deterministic(default_dataset, tmp_path):
    assert main(["simulate", "--out", str(tmp_path)]) == 0
    for name in (io.IMU_FILE, io.TRACKS_FILE, io.GROUNDTRUTH_FILE):
        assert (tmp_path / name).read_bytes() == (default_dataset / name).read_bytes()


def test_simulate_rejects_negative_rate(tmp_path, capsys):
    raw = json.loads(dump_config(AppConfig()))
    raw["simulation"]["rig"]["imu_rate"] = -1.0
    (tmp_path / "bad.json").write_text(json.dumps(raw, indent=2))
    code = main(["simulate", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)])
    assert code == 2
    err = capsys.readouterr().err
    assert "simulation.rig.imu_rate" in err and "line" in err


def test_check_default_passes(default_dataset, capsys):
    assert main(["check", "--data", str(default_dataset)]) == 0
    diag = json.loads(capsys.readouterr().out)
    assert diag["excitation"]["ok"]
    assert diag["imu"]["monotonic"]
    assert abs(diag["imu"]["rate_hz"] - 200) < 1e-6
    assert abs(diag["tracks"]["frame_rate_hz"] - 30) < 1e-6


def test_check_static_warns(tmp_path, capsys):
    cfg = write_config(tmp_path / "static.json", TrajectorySpec.static(duration=5.0))
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "d")]) == 0
    capsys.readouterr()
    assert main(["check", "--data", str(tmp_path / "d")]) == 0
    out = capsys.readouterr()
    assert not json.loads(out.out)["excitation"]["ok"]
    assert "warning: motion excitation" in out.err


def test_check_names_shuffled_imu_rows(short_dataset, tmp_path, capsys):
    src = short_dataset / "data"
    lines = (src / io.IMU_FILE).read_text().splitlines()
    rows = lines[2:]
    rng = np.random.default_rng(0)
    rng.shuffle(rows)
    (tmp_path / io.IMU_FILE).write_text("\n".join(lines[:2] + rows) + "\n")
    (tmp_path / io.TRACKS_FILE).write_bytes((src / io.TRACKS_FILE).read_bytes())
    assert main(["check", "--data", str(tmp_path)]) == 2
    out = capsys.readouterr()
    assert not json.loads(out.out)["imu"]["monotonic"]
    assert "IMU timestamps not strictly increasing" in out.err


def test_calibrate_truncated_dataset_fails_on_span(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", TrajectorySpec.aggressive(duration=1.0))
    d = tmp_path / "d"
    assert main(["simulate", "--config", cfg, "--out", str(d)]) == 0
    code = main(["calibrate", "--imu", str(d / io.IMU_FILE), "--tracks", str(d / io.TRACKS_FILE),
                 "--out", str(tmp_path / "out")])
    assert code == 2
    err = capsys.readouterr().err
    assert "[rotation_spline]" in err and "span" in err


def test_calibrate_without_long_tracks_fails_in_ego_velocity(short_dataset, tmp_path, capsys):
    src = short_dataset / "data"
    tracks = io.read_tracks(src / io.TRACKS_FILE)
    short = [FeatureTrack(t.track_id, t.frame_index[:2], t.t[:2], t.uv[:2], t.depth[:2])
             for t in tracks if len(t) >= 2]
    io.write_tracks(tmp_path / io.TRACKS_FILE, short)
    code = main(["calibrate", "--imu", str(src / io.IMU_FILE),
                 "--tracks", str(tmp_path / io.TRACKS_FILE), "--out", str(tmp_path / "out")])
    assert code == 2
    assert "[ego_velocity]" in capsys.readouterr().err


def test_calibrate_report_is_byte_identical(short_dataset, tmp_path):
    d = short_dataset / "data"
    args = ["calibrate", "--imu", str(d / io.IMU_FILE), "--tracks", str(d / io.TRACKS_FILE),
            "--config", str(short_dataset / "config.json")]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("report.json", "residuals_flow.csv", "convergence.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rep = json.loads((tmp_path / "a" / "report.json").read_text())
    gt = json.loads((d / io.GROUNDTRUTH_FILE).read_text())
    t_cm = np.array(rep["extrinsic_translation_cm"])
    assert np.linalg.norm(t_cm - 100 * np.array(gt["t_cb"])) < 2.0
    assert abs(rep["time_offset_ms"] - 1e3 * gt["t_off"]) < 1.0
    timing = json.loads((tmp_path / "a" / "timing.json").read_text())
    assert {"initialization_s", "batch_s", "total_s"} <= set(timing)
