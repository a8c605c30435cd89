"""Multi-stage initialization.

Stages, each consuming only the outputs of earlier ones:

1. rotation spline from the gyroscope alone (biases held at zero);
2. extrinsic rotation and time offset from frame-to-frame camera rotations;
3. per-frame camera ego-velocity from pixel velocities and depth;
4. extrinsic translation and gravity from ego-velocity differences versus
   integrated specific force;
5. world-frame velocity spline from the transferred ego-velocities.

The world frame is pinned by holding the first data-supported rotation
control point at identity, which places it at (approximately) the first IMU
body frame.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .config import CalibConfig
from .geometry import (exp_so3, hat, log_so3, normalize_rotation, right_jacobian_inv,
                       to_quaternion, from_quaternion)
from .lsq import assemble, block_columns, block_triplets, solve_normal
from .sensors import CameraIntrinsics, ImuData, ImuIntrinsics, interaction_matrices
from .splines import R3Spline, So3Spline
from .tracking import FlowFeatures, RelativeRotation

log = logging.getLogger(__name__)


class InitializationError(RuntimeError):
    """A stage could not produce an estimate from the given data."""


class ObservabilityError(InitializationError):
    """Motion is not exciting enough to observe the requested quantity."""


class InsufficientFeaturesError(InitializationError):
    pass


class DegenerateFrameError(InitializationError):
    pass


@dataclass
class CalibrationState:
    """Full estimator state: extrinsics, clock offset, gravity, splines, biases."""

    R_cb: np.ndarray
    t_cb: np.ndarray
    t_off: float
    g_w: np.ndarray
    rot_spline: So3Spline
    vel_spline: R3Spline | None
    imu_intr: ImuIntrinsics = field(default_factory=ImuIntrinsics.zero)
    anchor: int = 0

    def copy(self, **changes) -> "CalibrationState":
        return replace(self, **changes)


@dataclass
class EgoVelocity:
    t: float
    v_c: np.ndarray
    inliers: int
    rms: float
    sigma: float
    frame_index: int = -1


# -- stage 1: rotation spline ---------------------------------------------------

def _check_stream(imu: ImuData, min_span: float):
    if len(imu) == 0:
        raise InitializationError("empty gyroscope stream")
    if np.any(np.diff(imu.t) <= 0):
        raise InitializationError("IMU timestamps are not strictly increasing")
    if imu.span() < min_span:
        raise InitializationError(
            f"data span {imu.span():.3f} s shorter than required {min_span:.3f} s")


def _integrate_gyro(imu: ImuData, query: np.ndarray) -> np.ndarray:
    dt = np.diff(imu.t)
    steps = exp_so3(0.5 * (imu.gyro[1:] + imu.gyro[:-1]) * dt[:, None])
    Rs = np.empty((len(imu), 3, 3))
    Rs[0] = np.eye(3)
    for k, S in enumerate(steps):
        Rs[k + 1] = Rs[k] @ S
    # outside the data the last (first) rate is held, i.e. constant-rate extrapolation
    q = np.asarray(query, dtype=float)
    k = np.clip(np.searchsorted(imu.t, q, side="right") - 1, 0, len(imu) - 1)
    return normalize_rotation(Rs[k] @ exp_so3(imu.gyro[k] * (q - imu.t[k])[:, None]))


def control_point_centers(spline) -> np.ndarray:
    k = spline.order
    j = np.arange(spline.num_control_points)
    return spline.start_time + (j - k / 2.0 + 1.0) * spline.knot_spacing


def touched_control_points(spline, times: np.ndarray) -> np.ndarray:
    touched = np.zeros(spline.num_control_points, dtype=bool)
    i, _ = spline.segment(times)
    for m in range(spline.order):
        touched[i + m] = True
    return touched


def fit_rotation_spline(imu: ImuData, knot_spacing: float, cfg: CalibConfig) -> So3Spline:
    """Least-squares rotation spline whose body rate matches the gyroscope."""
    _check_stream(imu, cfg.min_span)
    spline = So3Spline.covering(imu.t[0], imu.t[-1], knot_spacing, cfg.spline_order,
                                pad=cfg.max_time_offset)
    anchor = int(spline.segment(imu.t[0])[0][0])
    init = _integrate_gyro(imu, control_point_centers(spline))
    cps = init[anchor].T @ init
    spline = spline.with_control_points(cps)

    N = spline.num_control_points
    free = np.ones(N, dtype=bool)
    free[anchor] = False
    col = np.full(N, -1)
    col[free] = 3 * np.arange(free.sum())
    n_par = 3 * int(free.sum())
    untouched = ~touched_control_points(spline, imu.t)
    prior_idx = np.nonzero(untouched & free)[0]
    prior_ref = cps[prior_idx].copy()
    w = 1.0 / cfg.noise.sigma_gyro
    k = spline.order
    n = len(imu)
    rows = np.arange(3 * n).reshape(n, 3)

    def linearize(sp_):
        ev = sp_.evaluate_full(imu.t, derivatives=1, jacobians=True)
        r = (ev.omega_body - imu.gyro) * w
        trip = []
        for m in range(k):
            trip.append(block_triplets(rows, block_columns(col[ev.index + m], 3),
                                       ev.d_omega[:, m] * w))
        r_all = [r.ravel()]
        if len(prior_idx):
            e = log_so3(np.swapaxes(prior_ref, -1, -2) @ sp_.control_points[prior_idx])
            prow = 3 * n + np.arange(3 * len(prior_idx)).reshape(-1, 3)
            trip.append(block_triplets(prow, block_columns(col[prior_idx], 3),
                                       right_jacobian_inv(e)))
            r_all.append(e.ravel())
        rr = np.concatenate(r_all)
        J = assemble(trip, len(rr), n_par)
        return rr, J

    def retract(sp_, dx):
        c = sp_.control_points.copy()
        c[free] = c[free] @ exp_so3(dx.reshape(-1, 3))
        return sp_.with_control_points(c)

    lam = 1e-6
    r, J = linearize(spline)
    cost = float(r @ r)
    for _ in range(50):
        g = J.T @ r
        if np.abs(g).max() < 1e-8:
            break
        H = J.T @ J
        improved = False
        while lam < 1e12:
            dx = solve_normal(H, g, lam)
            cand = retract(spline, dx)
            r2, J2 = linearize(cand)
            c2 = float(r2 @ r2)
            if c2 <= cost:
                improved = True
                lam = max(lam / 10.0, 1e-12)
                break
            lam *= 10.0
        if not improved:
            break
        rel = (cost - c2) / max(cost, 1e-300)
        spline, r, J, cost = cand, r2, J2, c2
        log.debug("rotation fit: cost %.6g step %.3g", cost, np.abs(dx).max())
        if rel < 1e-12 or np.abs(dx).max() < 1e-12:
            break
    cps = spline.control_points.copy()
    cps = normalize_rotation(cps)
    cps[anchor] = np.eye(3)
    return spline.with_control_points(cps)


def rotation_anchor(spline: So3Spline, t_first: float) -> int:
    return int(spline.segment(t_first)[0][0])


# -- stage 2: hand-eye rotation + time offset ----------------------------------

def _left_mat(q):
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([np.stack([w, -x, -y, -z], -1), np.stack([x, w, -z, y], -1),
                     np.stack([y, z, w, -x], -1), np.stack([z, -y, x, w], -1)], -2)


def _right_mat(q):
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([np.stack([w, -x, -y, -z], -1), np.stack([x, w, z, -y], -1),
                     np.stack([y, -z, w, x], -1), np.stack([z, y, -x, w], -1)], -2)


def _body_relative(spline: So3Spline, t_a: np.ndarray, t_b: np.ndarray, t_off: float):
    Ra = spline.evaluate(t_a + t_off)
    Rb = spline.evaluate(t_b + t_off)
    return np.swapaxes(Ra, -1, -2) @ Rb


def _quaternion_hand_eye(B: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Closed-form X with ``X C X^T ~= B`` (linear in the quaternion of X)."""
    M = _left_mat(to_quaternion(B)) - _right_mat(to_quaternion(C))
    _, _, Vt = np.linalg.svd(M.reshape(-1, 4), full_matrices=False)
    return from_quaternion(Vt[-1])


def hand_eye_residuals(R_cb: np.ndarray, C: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``Log(R_cb C R_cb^T B^T)`` per relative-rotation pair."""
    return log_so3(R_cb @ C @ R_cb.T @ np.swapaxes(B, -1, -2))


def rotation_excitation(C: np.ndarray) -> np.ndarray:
    """Accumulated rotation (rad) about the principal axes, descending."""
    phi = log_so3(C)
    _, vecs = np.linalg.eigh(phi.T @ phi)
    return np.sort(np.abs(phi @ vecs).sum(axis=0))[::-1]


@dataclass
class HandEyeResult:
    R_cb: np.ndarray
    t_off: float
    grid_t_off: float
    grid_step: float
    rms_deg: float
    iterations: int


def hand_eye_rotation(rel_rots: list[RelativeRotation], rot_spline: So3Spline,
                      cfg: CalibConfig, grid_step: float = 1e-3,
                      min_pairs: int = 10, min_excitation_deg: float = 15.0) -> HandEyeResult:
    """Extrinsic rotation and time offset: coarse offset grid, then joint
    Gauss-Newton refinement."""
    if len(rel_rots) < min_pairs:
        raise ObservabilityError(f"only {len(rel_rots)} relative rotations (need {min_pairs})")
    C = np.array([r.R for r in rel_rots])
    ta = np.array([r.t_n for r in rel_rots])
    tb = np.array([r.t_n1 for r in rel_rots])
    exc = np.degrees(rotation_excitation(C))
    if exc[1] < min_excitation_deg:
        raise ObservabilityError(
            f"rotation excitation {exc.round(2).tolist()} deg: need >= {min_excitation_deg} deg "
            "about two independent axes; record sufficiently excited motions")

    max_off = cfg.max_time_offset
    n_grid = int(round(max_off / grid_step))
    grid = np.arange(-n_grid, n_grid + 1) * grid_step
    lo, hi = rot_spline.domain
    ok = (ta - max_off >= lo) & (tb + max_off < hi)
    C, ta, tb = C[ok], ta[ok], tb[ok]

    scores = np.empty(len(grid))
    sols = []
    for j, off in enumerate(grid):
        B = _body_relative(rot_spline, ta, tb, off)
        X = _quaternion_hand_eye(B, C)
        e = hand_eye_residuals(X, C, B)
        scores[j] = float(np.sum(e * e))
        sols.append(X)
    best = int(np.argmin(scores))
    R_cb = sols[best]
    t_off = float(grid[best])

    it = 0
    for it in range(1, 31):
        B = _body_relative(rot_spline, ta, tb, t_off)
        e = hand_eye_residuals(R_cb, C, B)
        w_a = rot_spline.body_angular_velocity(ta + t_off)
        w_b = rot_spline.body_angular_velocity(tb + t_off)
        Jr_inv = right_jacobian_inv(e)
        Jl_inv = right_jacobian_inv(-e)
        # B(t + dt) ~= B Exp(dt (w_b - B^T w_a))
        w_rel = w_b - np.einsum("nji,nj->ni", B, w_a)
        J_t = -np.einsum("nij,njk,nk->ni", Jr_inv, B, w_rel)
        J_R = Jl_inv @ R_cb - Jr_inv @ B @ R_cb
        J = np.concatenate([J_R, J_t[:, :, None]], axis=2).reshape(-1, 4)
        dx = np.linalg.lstsq(J, -e.ravel(), rcond=None)[0]
        R_cb = normalize_rotation(R_cb @ exp_so3(dx[:3]))
        t_off = float(np.clip(t_off + dx[3], -max_off, max_off))
        if np.abs(dx).max() < 1e-12:
            break
    e = hand_eye_residuals(R_cb, C, _body_relative(rot_spline, ta, tb, t_off))
    rms = float(np.degrees(np.sqrt(np.mean(np.sum(e * e, axis=1)))))
    return HandEyeResult(R_cb, t_off, float(grid[best]), grid_step, rms, it)


# -- stage 3: ego-velocity ------------------------------------------------------

def estimate_ego_velocity(uv: np.ndarray, depth: np.ndarray, flow: np.ndarray,
                          w_c: np.ndarray, intr: CameraIntrinsics, cfg: CalibConfig,
                          t: float = 0.0) -> EgoVelocity:
    """Camera-frame linear velocity from one frame's pixel velocities."""
    m = len(depth)
    if m < cfg.min_features:
        raise InsufficientFeaturesError(f"{m} usable features (< {cfg.min_features})")
    A, B = interaction_matrices(uv, intr)
    M = A / np.asarray(depth, float)[:, None, None]
    b = flow - np.einsum("nij,j->ni", B, np.asarray(w_c, float))
    sigma = cfg.noise.sigma_pixel_vel
    def fit(keep):
        Mk = M[keep].reshape(-1, 3)
        N = Mk.T @ Mk
        if np.linalg.cond(N) > 1e8:
            raise DegenerateFrameError("ego-velocity normal matrix is ill-conditioned")
        return np.linalg.solve(N, Mk.T @ b[keep].ravel())

    keep = np.ones(m, dtype=bool)
    v = fit(keep)
    # backward elimination: a single reject pass is fooled by the contaminated first fit
    while keep.sum() > cfg.min_features:
        res = np.linalg.norm(np.einsum("nij,j->ni", M, v) - b, axis=1)
        res[~keep] = -1.0
        worst = int(np.argmax(res))
        if res[worst] <= 3.0 * sigma:
            break
        keep[worst] = False
        v = fit(keep)
    Mk = M[keep].reshape(-1, 3)
    rk = (np.einsum("nij,j->ni", M[keep], v) - b[keep]).ravel()
    # rms floor keeps weights finite on noiseless data
    rms = max(float(np.sqrt(np.mean(rk * rk))), 1e-3 * sigma)
    cov = rms**2 * np.linalg.inv(Mk.T @ Mk)
    return EgoVelocity(t, v, int(keep.sum()), rms, float(np.sqrt(np.trace(cov) / 3.0)))


def camera_angular_velocity(rot_spline: So3Spline, R_cb: np.ndarray, t_off: float,
                            t_cam: np.ndarray) -> np.ndarray:
    """``(R(s) R_cb)^T omega_world(s)`` = ``R_cb^T omega_body(s)``, s = t + t_off."""
    return rot_spline.body_angular_velocity(np.asarray(t_cam, float) + t_off) @ R_cb


def estimate_ego_velocities(features: FlowFeatures, rot_spline: So3Spline, R_cb: np.ndarray,
                            t_off: float, intr: CameraIntrinsics,
                            cfg: CalibConfig) -> list[EgoVelocity]:
    frames, starts = features.frames()
    if len(frames) == 0:
        return []
    t_frames = features.t[starts[:-1]]
    w_c = camera_angular_velocity(rot_spline, R_cb, t_off, t_frames)
    out = []
    for j, f in enumerate(frames):
        s = slice(starts[j], starts[j + 1])
        try:
            ev = estimate_ego_velocity(features.uv[s], features.depth[s], features.flow[s],
                                       w_c[j], intr, cfg, float(t_frames[j]))
        except (InsufficientFeaturesError, DegenerateFrameError):
            continue
        ev.frame_index = int(f)
        out.append(ev)
    return out


# -- stage 4: translation + gravity --------------------------------------------

def body_velocity_from_camera(rot_spline: So3Spline, R_cb, t_cb, t_off, t_cam, v_c):
    """World-frame IMU velocity from camera ego-velocity (rigid transfer)."""
    ev = rot_spline.evaluate_full(np.asarray(t_cam, float) + t_off, derivatives=1)
    R = ev.rotation
    w_w = ev.omega_world
    return (np.einsum("nij,nj->ni", R, np.asarray(v_c) @ R_cb.T)
            - np.cross(w_w, np.einsum("nij,j->ni", R, np.asarray(t_cb, float))))


def integrated_specific_force(imu: ImuData, rot_spline: So3Spline, s_a: np.ndarray,
                              s_b: np.ndarray) -> np.ndarray:
    """Trapezoidal ``int R(s) a(s) ds`` over IMU-clock intervals ``[s_a, s_b]``."""
    f = np.einsum("nij,nj->ni", rot_spline.evaluate(imu.t), imu.accel)
    t = imu.t
    cum = np.concatenate([np.zeros((1, 3)),
                          np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(t)[:, None], axis=0)])

    def prim(s):
        k = np.clip(np.searchsorted(t, s, side="right") - 1, 0, len(t) - 2)
        h = (s - t[k])[:, None]
        slope = (f[k + 1] - f[k]) / (t[k + 1] - t[k])[:, None]
        return cum[k] + h * f[k] + 0.5 * h * h * slope

    return prim(np.asarray(s_b, float)) - prim(np.asarray(s_a, float))


@dataclass
class AlignmentResult:
    t_cb: np.ndarray
    g_w: np.ndarray
    condition: float
    degenerate: bool


def align_translation_gravity(ego_vels: list[EgoVelocity], imu: ImuData,
                              rot_spline: So3Spline, R_cb: np.ndarray, t_off: float,
                              g_magnitude: float, max_condition: float = 1e10,
                              allow_degenerate: bool = False) -> AlignmentResult:
    """Linear solve for (t_cb, g_w) from consecutive ego-velocity pairs."""
    pairs = [(a, b) for a, b in zip(ego_vels[:-1], ego_vels[1:])
             if b.frame_index == a.frame_index + 1 or a.frame_index < 0]
    if len(pairs) < 3:
        raise ObservabilityError(f"only {len(pairs)} consecutive ego-velocity pairs")
    ta = np.array([a.t for a, _ in pairs])
    tb = np.array([b.t for _, b in pairs])
    va = np.array([a.v_c for a, _ in pairs])
    vb = np.array([b.v_c for _, b in pairs])
    sig = np.array([np.hypot(a.sigma, b.sigma) for a, b in pairs])

    ea = rot_spline.evaluate_full(ta + t_off, derivatives=1)
    eb = rot_spline.evaluate_full(tb + t_off, derivatives=1)
    Ka = hat(ea.omega_world) @ ea.rotation
    Kb = hat(eb.omega_world) @ eb.rotation
    dv_cam = (np.einsum("nij,nj->ni", eb.rotation, vb @ R_cb.T)
              - np.einsum("nij,nj->ni", ea.rotation, va @ R_cb.T))
    integ = integrated_specific_force(imu, rot_spline, ta + t_off, tb + t_off)
    dt = (tb - ta)[:, None, None]

    n = len(pairs)
    M = np.concatenate([-(Kb - Ka), -dt * np.eye(3)], axis=2)
    y = integ - dv_cam
    w = 1.0 / sig
    Mw = (M * w[:, None, None]).reshape(-1, 6)
    yw = (y * w[:, None]).ravel()
    scale = np.linalg.norm(Mw, axis=0)
    scale[scale == 0] = 1.0
    Ms = Mw / scale
    N = Ms.T @ Ms
    cond = float(np.linalg.cond(N))
    degenerate = cond > max_condition
    if degenerate and not allow_degenerate:
        raise ObservabilityError(
            f"translation/gravity alignment ill-conditioned (cond {cond:.3g}); "
            "record sufficiently excited motions")
    if degenerate:
        reg = np.diag([1.0, 1.0, 1.0, 0.0, 0.0, 0.0]) * 1e-9 * np.trace(N)
        x = np.linalg.solve(N + reg, Ms.T @ yw) / scale
    else:
        x = np.linalg.solve(N, Ms.T @ yw) / scale
    t_cb = x[:3]
    g = x[3:]
    g = g * (g_magnitude / np.linalg.norm(g))
    log.debug("alignment: %d pairs, cond %.3g", n, cond)
    return AlignmentResult(t_cb, g, cond, degenerate)


# -- stage 5: velocity spline ---------------------------------------------------

def fit_velocity_spline(ego_vels: list[EgoVelocity], rot_spline: So3Spline, R_cb: np.ndarray,
                        t_cb: np.ndarray, t_off: float, knot_spacing: float,
                        cfg: CalibConfig, domain: tuple[float, float] | None = None,
                        damping: float = 1e-8) -> R3Spline:
    """Linear least squares for velocity control points.

    ``domain`` defaults to the rotation spline's. Weak damping on control-point
    differences keeps points without data at their neighbours' value.
    """
    if not ego_vels:
        raise InitializationError("no ego-velocities to fit the velocity spline")
    t_cam = np.array([e.t for e in ego_vels])
    v_c = np.array([e.v_c for e in ego_vels])
    sig = np.array([e.sigma for e in ego_vels])
    v_w = body_velocity_from_camera(rot_spline, R_cb, t_cb, t_off, t_cam, v_c)
    if domain is None:
        lo, hi = rot_spline.domain
        spline = R3Spline(cfg.spline_order, lo, knot_spacing,
                          np.zeros((int(np.floor((hi - lo) / knot_spacing)) + cfg.spline_order, 3)))
    else:
        spline = R3Spline.covering(domain[0], domain[1], knot_spacing, cfg.spline_order)
    N = spline.num_control_points
    k = spline.order
    i, W = spline.basis_weights(t_cam + t_off)
    w = 1.0 / sig
    rows = np.repeat(np.arange(len(t_cam)), k)
    cols = (i[:, None] + np.arange(k)).ravel()
    Bm = sp.csr_matrix(((W * w[:, None]).ravel(), (rows, cols)), shape=(len(t_cam), N))
    D = sp.diags([-np.ones(N - 1), np.ones(N - 1)], [0, 1], shape=(N - 1, N))
    scale = max(float((w * w).mean()), 1e-300)
    H = (Bm.T @ Bm + damping * scale * (D.T @ D) + 1e-12 * scale * sp.eye(N)).tocsc()
    rhs = Bm.T @ (v_w * w[:, None])
    cps = np.column_stack([solve_normal(H, -rhs[:, c]) for c in range(3)])
    return spline.with_control_points(cps)
