import json

import numpy as np
import pytest

from velocal import io
from velocal.config import SensorRig, SimNoise, SimulationConfig, TrajectorySpec
from velocal.simulator import groundtruth, simulate


@pytest.fixture(scope="module")
def small():
    cfg = SimulationConfig(trajectory=TrajectorySpec(duration=2.0),
                           rig=SensorRig(noise=SimNoise(sigma_gyro=1e-3, sigma_acc=1e-2,
                                                        sigma_pixel=0.5, sigma_depth_rel=0.01)))
    return cfg, simulate(cfg)


def test_dataset_round_trip(small, tmp_path):
    cfg, ds = small
    paths = io.write_dataset(tmp_path, ds.imu, ds.tracks, groundtruth(cfg))
    imu = io.read_imu(paths["imu"])
    np.testing.assert_array_equal(imu.t, ds.imu.t)
    np.testing.assert_allclose(imu.gyro, ds.imu.gyro, rtol=0, atol=1e-9)
    np.testing.assert_allclose(imu.accel, ds.imu.accel, rtol=0, atol=1e-9)
    tracks = io.read_tracks(paths["tracks"])
    assert [t.track_id for t in tracks] == [t.track_id for t in ds.tracks]
    for a, b in zip(tracks, ds.tracks):
        np.testing.assert_array_equal(a.t, b.t)
        np.testing.assert_array_equal(a.frame_index, b.frame_index)
        np.testing.assert_allclose(a.uv, b.uv, rtol=0, atol=1e-9)
        np.testing.assert_allclose(a.depth, b.depth, rtol=0, atol=1e-9)


def test_empty_track_list_is_header_only(tmp_path):
    p = tmp_path / "tracks.csv"
    io.write_tracks(p, [])
    assert p.read_text().splitlines() == [io.TRACKS_HEADER, io.TRACK_COLUMNS]
    assert io.read_tracks(p) == []


def test_groundtruth_sidecar(small, tmp_path):
    cfg, ds = small
    paths = io.write_dataset(tmp_path, ds.imu, ds.tracks, groundtruth(cfg))
    gt = io.read_groundtruth(paths["groundtruth"])
    for key in ("R_cb", "t_cb", "t_off", "gravity_sim", "gravity_b0", "b_a", "b_w"):
        assert key in gt
    np.testing.assert_allclose(gt["R_cb"], cfg.rig.R_cb, atol=1e-15)
    assert gt["t_off"] == cfg.rig.t_off
    assert json.loads(paths["groundtruth"].read_text()) == gt


def _write(path, lines):
    path.write_text("\n".join(lines) + "\n")


def test_bad_header(tmp_path):
    p = tmp_path / "imu.csv"
    _write(p, ["t,wx,wy,wz,ax,ay,az", "0,0,0,0,0,0,0"])
    with pytest.raises(io.DatasetFormatError) as err:
        io.read_imu(p)
    assert err.value.line == 1


@pytest.mark.parametrize("row, message", [("0.01,1,2,3", "columns"),
                                          ("0.01,1,2,3,a,5,6", "numeric"),
                                          ("0.01,1,2,3,nan,5,6", "non-finite")])
def test_malformed_imu_rows_name_the_line(tmp_path, row, message):
    p = tmp_path / "imu.csv"
    _write(p, [io.IMU_HEADER, io.IMU_COLUMNS, "0,0,0,0,0,0,0", row])
    with pytest.raises(io.DatasetFormatError) as err:
        io.read_imu(p)
    assert err.value.line == 4
    assert message in str(err.value)
    assert ":4:" in str(err.value)


def test_imu_timestamps_must_increase(tmp_path):
    p = tmp_path / "imu.csv"
    _write(p, [io.IMU_HEADER, io.IMU_COLUMNS, "0,0,0,0,0,0,0", "0.01,0,0,0,0,0,0",
               "0.005,0,0,0,0,0,0"])
    with pytest.raises(io.DatasetFormatError, match="strictly increasing"):
        io.read_imu(p)


def test_track_rows_must_be_grouped(tmp_path):
    p = tmp_path / "tracks.csv"
    _write(p, [io.TRACKS_HEADER, io.TRACK_COLUMNS, "0,0,0.0,1,1,2", "1,0,0.0,5,5,2",
               "0,1,0.1,2,2,2"])
    with pytest.raises(io.DatasetFormatError, match="not grouped"):
        io.read_tracks(p)


def test_missing_file(tmp_path):
    with pytest.raises(io.DatasetFormatError, match="cannot read"):
        io.read_imu(tmp_path / "nope.csv")


def test_error_lines_count_blank_lines(tmp_path):
    p = tmp_path / "tracks.csv"
    _write(p, [io.TRACKS_HEADER, "", "0,0,0.0,1,1,2", "0,1,0.1,2,2,2", "", "0,2,0.1,3,3,2"])
    with pytest.raises(io.DatasetFormatError) as err:
        io.read_tracks(p)
    assert err.value.line == 6
