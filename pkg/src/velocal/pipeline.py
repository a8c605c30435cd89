"""End-to-end calibration: initialization stages, batch rounds, report."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import batch_solver as bs
from . import initializer as ini
from .config import CalibConfig
from .geometry import angle_between, euler_zyx, log_so3
from .sensors import ImuData
from .tracking import (FeatureTrack, FlowFeatures, ObservationTable, RansacParams,
                       TrackingResult, estimate_relative_rotations, gate_tracks, pixel_velocities)

log = logging.getLogger(__name__)

EULER_CONVENTION = "intrinsic Z-Y-X: R = Rz(yaw) Ry(pitch) Rx(roll)"
SIGNIFICANT_DIGITS = 9


class PipelineError(RuntimeError):
    """A stage failed; ``kind`` is ``validation`` or ``observability``."""

    def __init__(self, stage: str, cause: Exception, kind: str):
        self.stage = stage
        self.cause = cause
        self.kind = kind
        msg = f"[{stage}] {cause}"
        if kind == "observability" and "sufficiently excited motions" not in msg:
            msg += " (record sufficiently excited motions)"
        super().__init__(msg)


_OBSERVABILITY = (ini.ObservabilityError, ini.DegenerateFrameError, bs.StalledSolveError)


class _Stage:
    def __init__(self, name: str, timings: dict):
        self.name = name
        self.timings = timings

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.timings[self.name] = time.perf_counter() - self.t0
        if exc is None or isinstance(exc, PipelineError):
            return False
        kind = "observability" if isinstance(exc, _OBSERVABILITY) else "validation"
        if isinstance(exc, (ValueError, RuntimeError, LookupError)):
            raise PipelineError(self.name, exc, kind) from exc
        return False


@dataclass
class Snapshot:
    stage: str
    R_cb: np.ndarray | None = None
    t_cb: np.ndarray | None = None
    t_off: float | None = None
    g_w: np.ndarray | None = None
    b_w: np.ndarray | None = None
    b_a: np.ndarray | None = None
    rot_spline: object = None
    vel_spline: object = None

    @classmethod
    def of(cls, stage: str, state: ini.CalibrationState) -> "Snapshot":
        return cls(stage, state.R_cb, state.t_cb, state.t_off, state.g_w, state.imu_intr.b_w,
                   state.imu_intr.b_a, state.rot_spline, state.vel_spline)

    def values(self) -> dict[str, float]:
        out = {}
        if self.R_cb is not None:
            aa = np.degrees(log_so3(self.R_cb))
            ypr = np.degrees(euler_zyx(self.R_cb))
            out.update({f"rot_cb_{a}_deg": v for a, v in zip("xyz", aa)})
            out.update({f"{a}_deg": v for a, v in zip(("yaw", "pitch", "roll"), ypr)})
        if self.t_cb is not None:
            out.update({f"t_cb_{a}_cm": 100 * v for a, v in zip("xyz", self.t_cb)})
        if self.t_off is not None:
            out["t_off_ms"] = 1e3 * self.t_off
        if self.g_w is not None:
            out.update({f"g_{a}": v for a, v in zip("xyz", self.g_w)})
        if self.b_w is not None:
            out.update({f"b_w_{a}": v for a, v in zip("xyz", self.b_w)})
            out.update({f"b_a_{a}": v for a, v in zip("xyz", self.b_a)})
        return {k: float(v) for k, v in out.items()}


def convergence_errors(snapshots: list[Snapshot], times: np.ndarray) -> dict[str, list]:
    """Per-parameter error of each stage's estimate against the final one.

    Rotation/velocity splines are compared at ``times`` (IMU clock) by RMS
    angle (deg) and RMS velocity difference (m/s); gravity is compared as a
    direction in the body frame at those times, which is free of the world
    gauge.
    """
    final = snapshots[-1]
    out: dict[str, list] = {}

    def add(name, stage, value):
        out.setdefault(name, []).append((stage, float(value)))

    R_fin = final.rot_spline.evaluate(times)
    for s in snapshots:
        if s.rot_spline is not None:
            R = s.rot_spline.evaluate(times)
            # compare relative to the first query time to stay gauge free
            rel = np.swapaxes(R[:1], -1, -2) @ R
            rel_f = np.swapaxes(R_fin[:1], -1, -2) @ R_fin
            add("rotation_spline_deg", s.stage,
                np.sqrt(np.mean(np.degrees(angle_between(rel, rel_f)) ** 2)))
        if s.R_cb is not None:
            add("R_cb_deg", s.stage, np.degrees(angle_between(s.R_cb, final.R_cb)))
        if s.t_off is not None:
            add("t_off_ms", s.stage, 1e3 * abs(s.t_off - final.t_off))
        if s.t_cb is not None:
            add("t_cb_cm", s.stage, 100 * np.linalg.norm(s.t_cb - final.t_cb))
        if s.g_w is not None:
            gb = np.einsum("nji,j->ni", s.rot_spline.evaluate(times), s.g_w)
            gf = np.einsum("nji,j->ni", R_fin, final.g_w)
            c = np.sum(gb * gf, axis=1) / (np.linalg.norm(gb, axis=1) * np.linalg.norm(gf, axis=1))
            add("gravity_deg", s.stage,
                np.sqrt(np.mean(np.degrees(np.arccos(np.clip(c, -1, 1))) ** 2)))
        if s.vel_spline is not None:
            d = s.vel_spline.evaluate(times) - final.vel_spline.evaluate(times)
            add("velocity_spline_mps", s.stage, np.sqrt(np.mean(np.sum(d * d, axis=1))))
    return out


@dataclass
class CalibrationResult:
    state: ini.CalibrationState
    solve_report: bs.SolveReport
    snapshots: list[Snapshot]
    timings: dict[str, float]
    flow_t: np.ndarray
    flow_residuals: np.ndarray
    counts: dict[str, int]
    hand_eye: ini.HandEyeResult
    trace_times: np.ndarray = field(repr=False, default=None)

    def report(self) -> dict:
        return build_report(self)


@dataclass
class Initialization:
    """Everything the initialization stages produced, ahead of the batch solve."""

    state: ini.CalibrationState
    flow: FlowFeatures
    table: ObservationTable
    tracking: TrackingResult
    hand_eye: ini.HandEyeResult
    ego: list[ini.EgoVelocity]
    alignment: ini.AlignmentResult
    snapshots: list[Snapshot]
    timings: dict[str, float]


def initialize(imu: ImuData, tracks: list[FeatureTrack], cfg: CalibConfig) -> Initialization:
    timings: dict[str, float] = {}
    snaps: list[Snapshot] = []
    intr = cfg.camera.intrinsics()
    t_all = time.perf_counter()

    with _Stage("rotation_spline", timings):
        rot = ini.fit_rotation_spline(imu, cfg.rot_knot_spacing, cfg)
    anchor = ini.rotation_anchor(rot, imu.t[0])
    snaps.append(Snapshot("rotation_spline", rot_spline=rot))

    with _Stage("hand_eye", timings):
        gated = gate_tracks(tracks, cfg.min_depth, cfg.max_depth, min_length=2)
        table = ObservationTable.from_tracks(gated)
        rp = cfg.ransac
        params = RansacParams(rp.threshold_sigmas, rp.min_threshold, cfg.noise.sigma_depth_rel,
                              cfg.noise.sigma_pixel, rp.confidence, rp.max_iterations,
                              rp.min_inlier_ratio, cfg.seed)
        tracking = estimate_relative_rotations(table, intr, params)
        he = ini.hand_eye_rotation(tracking.relative_rotations, rot, cfg)
    snaps.append(Snapshot("hand_eye", R_cb=he.R_cb, t_off=he.t_off, rot_spline=rot))

    with _Stage("ego_velocity", timings):
        flow = pixel_velocities(table, tracking.link_ok)
        s = flow.t + he.t_off
        lo, hi = rot.domain
        flow = flow.select((s >= max(lo, imu.t[0])) & (s <= min(hi, imu.t[-1])))
        ego = ini.estimate_ego_velocities(flow, rot, he.R_cb, he.t_off, intr, cfg)
        if len(ego) < 3:
            raise ini.InsufficientFeaturesError(
                f"only {len(ego)} frames with >= {cfg.min_features} pixel velocities "
                "(tracks of at least 3 frames are required)")

    with _Stage("alignment", timings):
        al = ini.align_translation_gravity(ego, imu, rot, he.R_cb, he.t_off,
                                           cfg.gravity_magnitude)
    snaps.append(Snapshot("alignment", R_cb=he.R_cb, t_cb=al.t_cb, t_off=he.t_off, g_w=al.g_w,
                          rot_spline=rot))

    with _Stage("velocity_spline", timings):
        vel = ini.fit_velocity_spline(ego, rot, he.R_cb, al.t_cb, he.t_off,
                                      cfg.vel_knot_spacing, cfg)
    state = ini.CalibrationState(he.R_cb, al.t_cb, he.t_off, al.g_w, rot, vel, anchor=anchor)
    snaps.append(Snapshot.of("velocity_spline", state))
    timings["initialization"] = time.perf_counter() - t_all
    return Initialization(state, flow, table, tracking, he, ego, al, snaps, timings)


def calibrate(imu: ImuData, tracks: list[FeatureTrack], cfg: CalibConfig) -> CalibrationResult:
    t_all = time.perf_counter()
    init = initialize(imu, tracks, cfg)
    timings = init.timings
    snaps = init.snapshots
    intr = cfg.camera.intrinsics()

    t_batch = time.perf_counter()
    with _Stage("batch", timings):
        problem = bs.build_problem(init.state, imu, init.flow, intr, cfg)
        state, report = bs.solve(
            problem, init.state,
            on_round=lambda k, st: snaps.append(Snapshot.of(f"batch_{k + 1}", st)))
        ft, fr = bs.flow_residuals_raw(problem, state)
    timings["batch"] = time.perf_counter() - t_batch
    timings["total"] = time.perf_counter() - t_all

    counts = {"imu_samples": len(imu), "tracks": len(tracks),
              "frames": len(init.table.frame_times()),
              "relative_rotations": len(init.tracking.relative_rotations),
              "rejected_frame_pairs": init.tracking.rejected_pairs,
              "pixel_velocities": len(init.flow), "ego_velocities": len(init.ego),
              "active_flow_blocks": int(problem.flow_active.sum())}
    trace_times = np.linspace(imu.t[0], imu.t[-1], 200)
    return CalibrationResult(state, report, snaps, timings, ft, fr, counts, init.hand_eye,
                             trace_times)


# -- report ---------------------------------------------------------------------

def _round(x):
    if isinstance(x, dict):
        return {k: _round(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_round(v) for v in x]
    if isinstance(x, np.ndarray):
        return _round(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        v = float(x)
        if not np.isfinite(v):
            return None
        return float(f"{v:.{SIGNIFICANT_DIGITS}g}")
    return x


def build_report(res: CalibrationResult) -> dict:
    st = res.state
    sr = res.solve_report
    conv = convergence_errors(res.snapshots, res.trace_times)
    return _round({
        "format": "velocal-report v1",
        "extrinsic_rotation": {
            "axis_angle_deg": np.degrees(log_so3(st.R_cb)),
            "yaw_pitch_roll_deg": np.degrees(euler_zyx(st.R_cb)),
            "euler_convention": EULER_CONVENTION,
            "matrix": st.R_cb,
        },
        "extrinsic_translation_cm": 100 * st.t_cb,
        "time_offset_ms": 1e3 * st.t_off,
        "gravity_world": st.g_w,
        "gyro_bias": st.imu_intr.b_w,
        "accel_bias": st.imu_intr.b_a,
        "residuals": sr.residuals,
        "solver": {
            "rounds": [{"iterations": r.iterations, "initial_cost": r.initial_cost,
                        "final_cost": r.final_cost, "termination": r.termination,
                        "active_flow_blocks": r.active_flow, "deltas": r.deltas,
                        "cost_trace": r.cost_trace} for r in sr.rounds],
            "gauge": sr.gauge,
        },
        "hand_eye": {"grid_time_offset_ms": 1e3 * res.hand_eye.grid_t_off,
                     "rms_deg": res.hand_eye.rms_deg},
        "stages": [{"stage": s.stage, "values": s.values()} for s in res.snapshots],
        "convergence_error_vs_final": {k: [{"stage": s, "error": v} for s, v in vals]
                                       for k, vals in conv.items()},
        "counts": res.counts,
        "world_frame": ("orientation of the first data-supported rotation control point "
                        "(within one knot spacing of the first IMU sample)"),
    })


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def write_outputs(res: CalibrationResult, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": out / "report.json", "timing": out / "timing.json",
             "residuals": out / "residuals_flow.csv", "convergence": out / "convergence.csv"}
    paths["report"].write_text(dumps_report(build_report(res)))
    paths["timing"].write_text(json.dumps(_round({f"{k}_s": v for k, v in res.timings.items()}),
                                          indent=2, sort_keys=True) + "\n")
    with open(paths["residuals"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "ru", "rv"])
        for t, (ru, rv) in zip(res.flow_t, res.flow_residuals):
            w.writerow([f"{t:.9g}", f"{ru:.9g}", f"{rv:.9g}"])
    with open(paths["convergence"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "parameter", "value"])
        for s in res.snapshots:
            for k, v in s.values().items():
                w.writerow([s.stage, k, f"{v:.9g}"])
        for name, vals in convergence_errors(res.snapshots, res.trace_times).items():
            for stage, v in vals:
                w.writerow([stage, f"error_vs_final:{name}", f"{v:.9g}"])
        for k, r in enumerate(res.solve_report.rounds):
            for i, c in enumerate(r.cost_trace):
                w.writerow([f"batch_{k + 1}", f"cost[{i}]", f"{c:.9g}"])
    return paths
