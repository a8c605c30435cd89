"""Ground-truth trajectory and measurement synthesis.

Motion is an analytic sum of sinusoids, so the true derivatives used to
synthesize IMU data and the forward-model pixel velocities do not touch the
spline code they are meant to check.

Clocks: IMU samples are stamped in the IMU clock; each camera frame captured
at IMU time ``s`` is stamped ``s - t_off`` in the camera clock.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import SensorRig, SimulationConfig, Sinusoid, TrajectorySpec, WorldSpec
from .geometry import angle_between, log_so3
from .sensors import ImuData, optical_flow, project
from .tracking import FeatureTrack


def _series(terms: tuple[Sinusoid, ...], t: np.ndarray, derivative: int) -> np.ndarray:
    out = np.zeros_like(t)
    for s in terms:
        w = 2.0 * np.pi * s.frequency
        arg = w * t + s.phase
        out += s.amplitude * w**derivative * np.sin(arg + derivative * np.pi / 2.0)
    return out


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    R = np.zeros(a.shape + (3, 3))
    R[..., 0, 0] = 1
    R[..., 1, 1], R[..., 1, 2], R[..., 2, 1], R[..., 2, 2] = c, -s, s, c
    return R


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    R = np.zeros(a.shape + (3, 3))
    R[..., 1, 1] = 1
    R[..., 0, 0], R[..., 0, 2], R[..., 2, 0], R[..., 2, 2] = c, s, -s, c
    return R


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    R = np.zeros(a.shape + (3, 3))
    R[..., 2, 2] = 1
    R[..., 0, 0], R[..., 0, 1], R[..., 1, 0], R[..., 1, 1] = c, -s, s, c
    return R


class Trajectory:
    """Evaluates a :class:`TrajectorySpec` (world frame = simulator frame)."""

    def __init__(self, spec: TrajectorySpec):
        self.spec = spec

    def _angles(self, t, derivative=0):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        ang = np.stack([_series(self.spec.rotation[k], t, derivative) for k in range(3)], -1)
        rate = np.array(self.spec.rotation_rate)
        if derivative == 0:
            ang = ang + np.array(self.spec.rotation_offset) + t[:, None] * rate
        elif derivative == 1:
            ang = ang + rate
        return ang

    def rotation(self, t) -> np.ndarray:
        a = self._angles(t)
        return _rz(a[:, 2]) @ _ry(a[:, 1]) @ _rx(a[:, 0])

    def omega_body(self, t) -> np.ndarray:
        a = self._angles(t)
        d = self._angles(t, 1)
        Rx = _rx(a[:, 0])
        Ry = _ry(a[:, 1])
        ex, ey, ez = np.eye(3)
        w = d[:, 0, None] * ex
        w = w + d[:, 1, None] * np.einsum("nji,j->ni", Rx, ey)
        w = w + d[:, 2, None] * np.einsum("nji,j->ni", Ry @ Rx, ez)
        return w

    def omega_world(self, t) -> np.ndarray:
        return np.einsum("nij,nj->ni", self.rotation(t), self.omega_body(t))

    def position(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.stack([_series(self.spec.translation[k], t, 0) for k in range(3)], -1)

    def velocity(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.stack([_series(self.spec.translation[k], t, 1) for k in range(3)], -1)

    def acceleration(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.stack([_series(self.spec.translation[k], t, 2) for k in range(3)], -1)


def imu_times(spec: TrajectorySpec, rig: SensorRig) -> np.ndarray:
    n = int(round(spec.duration * rig.imu_rate))
    return np.arange(n) / rig.imu_rate


def frame_times(spec: TrajectorySpec, rig: SensorRig) -> np.ndarray:
    """Camera-clock frame stamps whose IMU-clock capture lies inside the data."""
    margin = 0.1
    start = margin
    stop = spec.duration - margin - 1.0 / rig.imu_rate
    n = int(np.floor((stop - start) * rig.frame_rate)) + 1
    return start + np.arange(n) / rig.frame_rate


def sample_imu(spec: TrajectorySpec, rig: SensorRig, seed: int = 0) -> ImuData:
    traj = Trajectory(spec)
    t = imu_times(spec, rig)
    R = traj.rotation(t)
    w = traj.omega_body(t)
    a = np.einsum("nji,nj->ni", R, traj.acceleration(t) - rig.gravity)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    gyro = w + np.array(rig.b_w) + rig.noise.sigma_gyro * rng.standard_normal(w.shape)
    acc = a + np.array(rig.b_a) + rig.noise.sigma_acc * rng.standard_normal(a.shape)
    return ImuData(t, gyro, acc)


def make_landmarks(world: WorldSpec, seed: int = 0, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    n = world.landmarks
    if world.distribution == "box":
        r = world.outer_radius
        pts = rng.uniform(-r, r, size=(n, 3))
    else:
        d = rng.standard_normal((n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = rng.uniform(world.inner_radius, world.outer_radius, size=n)
        pts = d * r[:, None]
    return pts + np.asarray(center)


@dataclass
class CameraMotion:
    """True camera kinematics at frame times (camera clock stamps)."""

    t_cam: np.ndarray
    R_wc: np.ndarray
    p_wc: np.ndarray
    v_c: np.ndarray
    w_c: np.ndarray


def camera_motion(spec: TrajectorySpec, rig: SensorRig, t_cam: np.ndarray) -> CameraMotion:
    traj = Trajectory(spec)
    s = np.asarray(t_cam, dtype=float) + rig.t_off
    R = traj.rotation(s)
    wb = traj.omega_body(s)
    R_cb = rig.R_cb
    t_cb = np.array(rig.t_cb)
    R_wc = R @ R_cb
    p_wc = traj.position(s) + R @ t_cb
    # camera-frame velocity of the camera origin: R_cb^T (R^T v_w + w_b x t_cb)
    vb = np.einsum("nji,nj->ni", R, traj.velocity(s))
    v_c = (vb + np.cross(wb, t_cb)) @ R_cb
    w_c = wb @ R_cb
    return CameraMotion(np.asarray(t_cam, float), R_wc, p_wc, v_c, w_c)


@dataclass
class RenderedFrames:
    tracks: list[FeatureTrack]
    visible_per_frame: np.ndarray
    outlier_mask: dict[int, np.ndarray]


def render_tracks(spec: TrajectorySpec, world: WorldSpec, rig: SensorRig, seed: int = 0,
                  landmarks: np.ndarray | None = None) -> RenderedFrames:
    """Project landmarks into every frame and link continuous sightings.

    A landmark keeps its track id while it stays visible in consecutive
    frames; re-entering the view starts a new track.
    """
    intr = rig.camera.intrinsics()
    pts_w = make_landmarks(world, seed) if landmarks is None else np.asarray(landmarks, float)
    t_cam = frame_times(spec, rig)
    motion = camera_motion(spec, rig, t_cam)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    nz = rig.noise
    n_lm = len(pts_w)

    current = np.full(n_lm, -1)
    next_id = 0
    obs: dict[int, list] = {}
    visible_counts = np.zeros(len(t_cam), dtype=int)
    for f, tc in enumerate(t_cam):
        pc = (pts_w - motion.p_wc[f]) @ motion.R_wc[f]
        z = pc[:, 2]
        vis = (z >= rig.min_depth) & (z <= rig.max_depth)
        uv = np.full((n_lm, 2), -1.0)
        uv[vis] = project(pc[vis], intr)
        vis &= intr.contains(uv)
        uv_n = uv + nz.sigma_pixel * rng.standard_normal(uv.shape)
        z_n = z * (1.0 + nz.sigma_depth_rel * rng.standard_normal(n_lm))
        vis &= intr.contains(uv_n) & (z_n > 0)
        if nz.outlier_fraction > 0:
            bad = vis & (rng.random(n_lm) < nz.outlier_fraction)
            nb = int(bad.sum())
            uv_n[bad] = rng.uniform([0, 0], [intr.width, intr.height], size=(nb, 2))
            z_n[bad] = rng.uniform(rig.min_depth, rig.max_depth, size=nb)
        else:
            bad = np.zeros(n_lm, dtype=bool)
        visible_counts[f] = int(vis.sum())
        new = vis & (current < 0)
        current[new] = next_id + np.arange(int(new.sum()))
        next_id += int(new.sum())
        current[~vis] = -1
        for lm in np.nonzero(vis)[0]:
            obs.setdefault(int(current[lm]), []).append(
                (f, tc, uv_n[lm, 0], uv_n[lm, 1], z_n[lm], bool(bad[lm])))

    tracks = []
    outliers = {}
    for tid in sorted(obs):
        rows = obs[tid]
        arr = np.array([r[:5] for r in rows], dtype=float)
        tracks.append(FeatureTrack(tid, arr[:, 0].astype(int), arr[:, 1], arr[:, 2:4], arr[:, 4]))
        outliers[tid] = np.array([r[5] for r in rows])
    return RenderedFrames(tracks, visible_counts, outliers)


def true_pixel_velocities(spec: TrajectorySpec, rig: SensorRig, frame_index: np.ndarray,
                          uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Forward-model pixel velocity for observations at given frames."""
    t_cam = frame_times(spec, rig)
    motion = camera_motion(spec, rig, t_cam[frame_index])
    return optical_flow(uv, depth, motion.v_c, motion.w_c, rig.camera.intrinsics())


@dataclass
class Dataset:
    config: SimulationConfig
    imu: ImuData
    tracks: list[FeatureTrack]
    visible_per_frame: np.ndarray
    outlier_mask: dict[int, np.ndarray]

    def groundtruth(self) -> dict:
        return groundtruth(self.config)


def simulate(cfg: SimulationConfig, seed: int | None = None) -> Dataset:
    seed = cfg.seed if seed is None else seed
    imu = sample_imu(cfg.trajectory, cfg.rig, seed)
    frames = render_tracks(cfg.trajectory, cfg.world, cfg.rig, seed)
    return Dataset(cfg, imu, frames.tracks, frames.visible_per_frame, frames.outlier_mask)


def groundtruth(cfg: SimulationConfig) -> dict:
    """Rig truth plus sampled poses. Gravity is given both in the simulator
    frame and in the first IMU frame (the estimator's world)."""
    spec, rig = cfg.trajectory, cfg.rig
    traj = Trajectory(spec)
    t0 = imu_times(spec, rig)[0]
    R0 = traj.rotation(t0)[0]
    t_cam = frame_times(spec, rig)
    s = t_cam + rig.t_off
    R = traj.rotation(s)
    return {
        "R_cb": rig.R_cb.tolist(),
        "rot_cb": list(rig.rot_cb),
        "t_cb": list(rig.t_cb),
        "t_off": rig.t_off,
        "gravity_sim": rig.gravity.tolist(),
        "gravity_b0": (R0.T @ rig.gravity).tolist(),
        "R_w_b0": R0.tolist(),
        "b_a": list(rig.b_a),
        "b_w": list(rig.b_w),
        "frames": {
            "t_cam": t_cam.tolist(),
            "rot_wb": log_so3(R).tolist(),
            "p_wb": traj.position(s).tolist(),
            "v_wb": traj.velocity(s).tolist(),
        },
        "config": cfg.model_dump(mode="json"),
    }


def excitation_metrics(imu: ImuData) -> dict:
    """Rotation excitation about principal axes and specific-force variation."""
    if len(imu) < 2:
        return {"rotation_deg": [0.0, 0.0, 0.0], "accel_variation": 0.0}
    dt = np.diff(imu.t)
    w = 0.5 * (imu.gyro[1:] + imu.gyro[:-1])
    scatter = (w * dt[:, None]).T @ w
    _, vecs = np.linalg.eigh(scatter)
    per_axis = np.abs(w @ vecs).T @ dt
    mag = np.linalg.norm(imu.accel, axis=1)
    lo, hi = np.percentile(mag, [5, 95])
    return {"rotation_deg": sorted(np.degrees(per_axis).tolist(), reverse=True),
            "accel_variation": float(hi - lo)}


def excitation_ok(metrics: dict, min_rotation_deg: float = 30.0, min_axes: int = 2,
                  min_accel_variation: float = 2.0) -> bool:
    rot = metrics["rotation_deg"]
    return (sum(r >= min_rotation_deg for r in rot) >= min_axes
            and metrics["accel_variation"] >= min_accel_variation)


def gravity_error_deg(R_est: np.ndarray, g_est: np.ndarray, R_true: np.ndarray,
                      g_true: np.ndarray) -> float:
    """Angle between body-frame gravity directions (free of world yaw)."""
    a = R_est.T @ g_est
    b = R_true.T @ g_true
    c = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def rotation_error_deg(R_est, R_true) -> float:
    return float(np.degrees(angle_between(R_est, R_true)))
