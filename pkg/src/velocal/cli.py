"""``velocal`` command line: simulate, calibrate, check.

Exit codes: 0 success, 2 invalid input (config, files, preconditions),
3 observability or convergence failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, dump_config, load_config
from .pipeline import PipelineError, calibrate, write_outputs
from .sensors import ImuData
from .simulator import excitation_metrics, excitation_ok, groundtruth, simulate

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_UNOBSERVABLE = 3

log = logging.getLogger("velocal")


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    sim = cfg.simulation
    if args.seed is not None:
        sim = sim.model_copy(update={"seed": args.seed})
    ds = simulate(sim)
    paths = io.write_dataset(args.out, ds.imu, ds.tracks, groundtruth(sim))
    (Path(args.out) / "config.json").write_text(dump_config(cfg.model_copy(
        update={"simulation": sim})) + "\n")
    print(f"wrote {len(ds.imu)} IMU samples and {len(ds.tracks)} tracks to {args.out}")
    for name, p in paths.items():
        print(f"  {name}: {p}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = load_config(args.config).calibration
    imu = io.read_imu(args.imu)
    tracks = io.read_tracks(args.tracks)
    res = calibrate(imu, tracks, cfg)
    paths = write_outputs(res, args.out)
    rep = json.loads(paths["report"].read_text())
    rot = rep["extrinsic_rotation"]
    print("R_cb yaw/pitch/roll (deg):", " ".join(f"{v:.4f}" for v in rot["yaw_pitch_roll_deg"]))
    print("t_cb (cm):", " ".join(f"{v:.3f}" for v in rep["extrinsic_translation_cm"]))
    print(f"t_off (ms): {rep['time_offset_ms']:.3f}")
    t = res.timings
    print(f"time: initialization {t['initialization']:.2f} s, batch {t['batch']:.2f} s, "
          f"total {t['total']:.2f} s")
    print(f"outputs in {args.out}")
    return EXIT_OK


def _histogram(lengths: np.ndarray) -> dict[str, int]:
    edges = [2, 3, 5, 10, 20, 50, 100]
    out = {"1": int(np.sum(lengths == 1))}
    for lo, hi in zip(edges[:-1], edges[1:]):
        out[f"{lo}-{hi - 1}"] = int(np.sum((lengths >= lo) & (lengths < hi)))
    out[f">={edges[-1]}"] = int(np.sum(lengths >= edges[-1]))
    return out


def cmd_check(args) -> int:
    data = Path(args.data)
    imu_rows, lines = io.read_imu_table(data / io.IMU_FILE, with_lines=True)
    problems = []
    warnings = []
    t = imu_rows[:, 0]
    bad = np.nonzero(np.diff(t) <= 0)[0]
    monotonic = len(bad) == 0
    if not monotonic:
        problems.append("IMU timestamps not strictly increasing "
                        f"(first at file line {lines[bad[0] + 1]})")
    order = np.argsort(t, kind="stable")
    ts = t[order]
    keep = np.r_[True, np.diff(ts) > 0]
    imu = ImuData(ts[keep], imu_rows[order][keep, 1:4], imu_rows[order][keep, 4:7])
    dt = np.diff(imu.t)
    imu_rate = float(1.0 / np.median(dt)) if len(dt) else 0.0

    track_rows = io.read_tracks_table(data / io.TRACKS_FILE)
    tracks = io.read_tracks(data / io.TRACKS_FILE)
    lengths = np.array([len(tr) for tr in tracks], dtype=int)
    frame_t = np.unique(track_rows[:, 2]) if len(track_rows) else np.zeros(0)
    frame_rate = float(1.0 / np.median(np.diff(frame_t))) if len(frame_t) > 1 else 0.0

    exc = excitation_metrics(imu)
    if not excitation_ok(exc):
        warnings.append("motion excitation below thresholds (need >= 30 deg about >= 2 axes and "
                        ">= 2 m/s^2 specific-force variation); record sufficiently excited motions")
    diag = {
        "imu": {"samples": int(len(t)), "monotonic": monotonic, "rate_hz": imu_rate,
                "span_s": float(ts[-1] - ts[0]) if len(ts) > 1 else 0.0},
        "tracks": {"count": int(len(tracks)), "observations": int(len(track_rows)),
                   "frames": int(len(frame_t)), "frame_rate_hz": frame_rate,
                   "length_histogram": _histogram(lengths),
                   "usable_for_pixel_velocity": int(np.sum(lengths >= 3))},
        "excitation": {"rotation_deg": exc["rotation_deg"],
                       "accel_variation_mps2": exc["accel_variation"],
                       "ok": bool(excitation_ok(exc))},
        "warnings": warnings,
        "errors": problems,
    }
    print(json.dumps(diag, indent=2))
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    for p in problems:
        _err(p)
    return EXIT_INVALID if problems else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="velocal",
                                description="Target-free RGBD-inertial spatiotemporal calibration")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="synthesize an IMU + feature-track dataset")
    s.add_argument("--config", help="JSON config (defaults if omitted)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, help="override the simulation seed")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("calibrate", help="estimate R_cb, t_cb, t_off, gravity and biases")
    c.add_argument("--imu", required=True)
    c.add_argument("--tracks", required=True)
    c.add_argument("--config", help="JSON config (defaults if omitted)")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_calibrate)

    k = sub.add_parser("check", help="dataset diagnostics")
    k.add_argument("--data", required=True, help="dataset directory")
    k.set_defaults(func=cmd_check)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(f"config: {exc}")
        return EXIT_INVALID
    except io.DatasetFormatError as exc:
        _err(str(exc))
        return EXIT_INVALID
    except PipelineError as exc:
        _err(str(exc))
        return EXIT_UNOBSERVABLE if exc.kind == "observability" else EXIT_INVALID
    except OSError as exc:
        _err(str(exc))
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
