"""Dataset files: IMU CSV, feature-track CSV and the ground-truth sidecar.

IMU file::

    # velocal-imu v1
    t,wx,wy,wz,ax,ay,az

Track file::

    # velocal-tracks v1
    track_id,frame_index,t,u,v,depth

Floats are written with 17 significant digits so a write/read cycle is exact.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .sensors import ImuData
from .tracking import FeatureTrack

IMU_HEADER = "# velocal-imu v1"
TRACKS_HEADER = "# velocal-tracks v1"
IMU_COLUMNS = "t,wx,wy,wz,ax,ay,az"
TRACK_COLUMNS = "track_id,frame_index,t,u,v,depth"

IMU_FILE = "imu.csv"
TRACKS_FILE = "tracks.csv"
GROUNDTRUTH_FILE = "groundtruth.json"


class DatasetFormatError(ValueError):
    def __init__(self, path, message: str, line: int | None = None):
        self.path = str(path)
        self.line = line
        where = f":{line}" if line else ""
        super().__init__(f"{path}{where}: {message}")


def _read_table(path: Path, header: str, columns: str) -> tuple[np.ndarray, np.ndarray]:
    """Numeric rows and the 1-based file line of each row."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DatasetFormatError(path, f"cannot read file ({exc.strerror})") from None
    if not lines or lines[0].strip() != header:
        raise DatasetFormatError(path, f"expected header {header!r}", 1)
    width = len(columns.split(","))
    rows = []
    line_no = []
    for n, line in enumerate(lines[1:], start=2):
        text = line.strip()
        if not text or (n == 2 and text == columns):
            continue
        parts = text.split(",")
        if len(parts) != width:
            raise DatasetFormatError(path, f"expected {width} columns, got {len(parts)}", n)
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise DatasetFormatError(path, "non-numeric field", n) from None
        if not all(math.isfinite(v) for v in vals):
            raise DatasetFormatError(path, "non-finite value", n)
        rows.append(vals)
        line_no.append(n)
    return np.array(rows, dtype=float).reshape(-1, width), np.array(line_no, dtype=int)


def read_imu_table(path, with_lines: bool = False):
    """Raw (n, 7) rows in file order, without ordering checks."""
    arr, lines = _read_table(Path(path), IMU_HEADER, IMU_COLUMNS)
    return (arr, lines) if with_lines else arr


def read_imu(path) -> ImuData:
    arr, lines = read_imu_table(path, with_lines=True)
    bad = np.nonzero(np.diff(arr[:, 0]) <= 0)[0]
    if len(bad):
        raise DatasetFormatError(path, "IMU timestamps are not strictly increasing",
                                 int(lines[bad[0] + 1]))
    return ImuData(arr[:, 0], arr[:, 1:4], arr[:, 4:7])


def write_imu(path, imu: ImuData) -> None:
    data = np.column_stack([imu.t, imu.gyro, imu.accel]) if len(imu) else np.zeros((0, 7))
    with open(path, "w") as fh:
        fh.write(IMU_HEADER + "\n" + IMU_COLUMNS + "\n")
        np.savetxt(fh, data, fmt="%.17g", delimiter=",")


def read_tracks_table(path) -> np.ndarray:
    return _read_table(Path(path), TRACKS_HEADER, TRACK_COLUMNS)[0]


def read_tracks(path) -> list[FeatureTrack]:
    arr, lines = _read_table(Path(path), TRACKS_HEADER, TRACK_COLUMNS)
    if len(arr) == 0:
        return []
    ids = arr[:, 0]
    if np.any(ids != np.round(ids)) or np.any(arr[:, 1] != np.round(arr[:, 1])):
        raise DatasetFormatError(path, "track_id and frame_index must be integers")
    breaks = np.nonzero(np.diff(ids))[0] + 1
    starts = np.r_[0, breaks]
    seen = set()
    tracks = []
    for a, b in zip(starts, np.r_[breaks, len(arr)]):
        tid = int(ids[a])
        if tid in seen:
            raise DatasetFormatError(path, f"rows of track {tid} are not grouped",
                                     int(lines[a]))
        seen.add(tid)
        chunk = arr[a:b]
        bad = np.nonzero(np.diff(chunk[:, 2]) <= 0)[0]
        if len(bad):
            raise DatasetFormatError(path, f"track {tid}: timestamps not strictly increasing",
                                     int(lines[a + bad[0] + 1]))
        tracks.append(FeatureTrack(tid, chunk[:, 1].astype(int), chunk[:, 2].copy(),
                                   chunk[:, 3:5].copy(), chunk[:, 5].copy()))
    return tracks


def write_tracks(path, tracks: list[FeatureTrack]) -> None:
    with open(path, "w") as fh:
        fh.write(TRACKS_HEADER + "\n" + TRACK_COLUMNS + "\n")
        for tr in tracks:
            for f, t, (u, v), z in zip(tr.frame_index, tr.t, tr.uv, tr.depth):
                fh.write(f"{tr.track_id},{int(f)},{t:.17g},{u:.17g},{v:.17g},{z:.17g}\n")


def write_dataset(out_dir, imu: ImuData, tracks: list[FeatureTrack],
                  groundtruth: dict | None = None) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"imu": out / IMU_FILE, "tracks": out / TRACKS_FILE}
    write_imu(paths["imu"], imu)
    write_tracks(paths["tracks"], tracks)
    if groundtruth is not None:
        paths["groundtruth"] = out / GROUNDTRUTH_FILE
        paths["groundtruth"].write_text(json.dumps(groundtruth, indent=2, sort_keys=True) + "\n")
    return paths


def read_groundtruth(path) -> dict:
    return json.loads(Path(path).read_text())
