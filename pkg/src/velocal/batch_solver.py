"""Continuous-time batch refinement over all calibration states.

Three residual families, each whitened by per-family sigmas and wrapped in a
Huber loss:

* gyro:  ``omega_b(t) + b_w - w_meas``
* accel: ``R(t)^T (a_w(t) - g) + b_a - a_meas`` with ``a_w`` the velocity
  spline's derivative
* flow:  ``A v_c / z + B w_c - flow_meas`` with the splines queried at the
  shifted time ``t_cam + t_off``

The solver is Levenberg-Marquardt on the IRLS-reweighted system. Rotation
control points and ``R_cb`` take right perturbations, gravity moves on its
sphere through a 2D tangent, ``t_off`` is clamped to the expected range.
"""

from __future__ import annotations

import logging
from typing import Callable
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .config import CalibConfig
from .geometry import exp_so3, hat, normalize_rotation, sphere_basis, sphere_retract
from .initializer import CalibrationState, touched_control_points
from .lsq import assemble, block_columns, block_triplets, huber_cost, huber_weights, solve_normal
from .sensors import CameraIntrinsics, ImuData, ImuIntrinsics, interaction_matrices
from .splines import So3Evaluation
from .tracking import FlowFeatures

log = logging.getLogger(__name__)

FAMILIES = ("gyro", "accel", "flow")


class StalledSolveError(RuntimeError):
    """No step reduced the cost even after heavy damping."""

    def __init__(self, message: str, report: "SolveReport"):
        super().__init__(message)
        self.report = report


class EmptyProblemError(ValueError):
    pass


# -- single-sample residuals ----------------------------------------------------

def gyro_residual(state: CalibrationState, gyro: np.ndarray, t: float) -> np.ndarray:
    w = state.rot_spline.body_angular_velocity(float(t))
    return w + state.imu_intr.b_w - np.asarray(gyro, float)


def accel_residual(state: CalibrationState, accel: np.ndarray, t: float) -> np.ndarray:
    R = state.rot_spline.evaluate(float(t))
    a_w = state.vel_spline.derivative(np.array([float(t)]))[0]
    return R.T @ (a_w - state.g_w) + state.imu_intr.b_a - np.asarray(accel, float)


def camera_velocity(state: CalibrationState, t_cam: float) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame linear and angular velocity at camera time ``t_cam``."""
    s = np.array([float(t_cam) + state.t_off])
    ev = state.rot_spline.evaluate_full(s, derivatives=1)
    R, w_b = ev.rotation[0], ev.omega_body[0]
    v_w = state.vel_spline.evaluate(s)[0]
    v_c = state.R_cb.T @ (R.T @ v_w + np.cross(w_b, state.t_cb))
    return v_c, state.R_cb.T @ w_b


def flow_residual(state: CalibrationState, uv: np.ndarray, depth: float, flow: np.ndarray,
                  t_cam: float, intr: CameraIntrinsics) -> np.ndarray:
    v_c, w_c = camera_velocity(state, t_cam)
    A, B = interaction_matrices(np.asarray(uv, float), intr)
    return A @ v_c / depth + B @ w_c - np.asarray(flow, float)


# -- parameter layout -----------------------------------------------------------

@dataclass
class ParameterLayout:
    """Column offsets; fixed control points map to -1."""

    rot_col: np.ndarray
    vel_col: np.ndarray
    R_cb: int
    t_cb: int
    t_off: int
    g: int
    b_w: int
    b_a: int
    size: int

    @classmethod
    def build(cls, rot_free: np.ndarray, vel_free: np.ndarray) -> "ParameterLayout":
        rot_col = np.full(len(rot_free), -1)
        rot_col[rot_free] = 3 * np.arange(rot_free.sum())
        o = 3 * int(rot_free.sum())
        vel_col = np.full(len(vel_free), -1)
        vel_col[vel_free] = o + 3 * np.arange(vel_free.sum())
        o += 3 * int(vel_free.sum())
        return cls(rot_col, vel_col, o, o + 3, o + 6, o + 7, o + 9, o + 12, o + 15)

    def names(self) -> dict[str, slice]:
        return {"R_cb": slice(self.R_cb, self.R_cb + 3), "t_cb": slice(self.t_cb, self.t_cb + 3),
                "t_off": slice(self.t_off, self.t_off + 1), "g": slice(self.g, self.g + 2),
                "b_w": slice(self.b_w, self.b_w + 3), "b_a": slice(self.b_a, self.b_a + 3)}


def _fixed_cols(n: int, start: int, width: int) -> np.ndarray:
    return np.broadcast_to(start + np.arange(width), (n, width))


@dataclass(frozen=True)
class ResidualBlock:
    """Bookkeeping view of one residual (the solver works on whole families)."""

    kind: str
    index: int
    rot_knots: tuple[int, ...]
    vel_knots: tuple[int, ...]
    parameters: tuple[str, ...]
    huber: float


@dataclass
class Problem:
    imu: ImuData
    flow: FlowFeatures
    intr: CameraIntrinsics
    cfg: CalibConfig
    layout: ParameterLayout
    flow_sigma: np.ndarray
    flow_active: np.ndarray
    rot_free: np.ndarray
    vel_free: np.ndarray

    @property
    def sigma(self) -> dict[str, float]:
        n = self.cfg.noise
        return {"gyro": n.sigma_gyro, "accel": n.sigma_acc, "flow": n.sigma_pixel_vel}

    @property
    def huber(self) -> dict[str, float]:
        n = self.cfg.noise
        return {"gyro": n.huber_gyro, "accel": n.huber_acc, "flow": n.huber_flow}

    def counts(self) -> dict[str, int]:
        return {"gyro": len(self.imu), "accel": len(self.imu), "flow": int(self.flow_active.sum())}

    def blocks(self, state: CalibrationState) -> list[ResidualBlock]:
        k_r = state.rot_spline.order
        k_v = state.vel_spline.order
        out = []
        ir, _ = state.rot_spline.segment(self.imu.t)
        iv, _ = state.vel_spline.segment(self.imu.t)
        for n in range(len(self.imu)):
            out.append(ResidualBlock("gyro", n, tuple(range(ir[n], ir[n] + k_r)), (),
                                     ("b_w",), self.huber["gyro"]))
        for n in range(len(self.imu)):
            out.append(ResidualBlock("accel", n, tuple(range(ir[n], ir[n] + k_r)),
                                     tuple(range(iv[n], iv[n] + k_v)), ("g", "b_a"),
                                     self.huber["accel"]))
        idx = np.nonzero(self.flow_active)[0]
        s = self.flow.t[idx] + state.t_off
        fr, _ = state.rot_spline.segment(s)
        fv, _ = state.vel_spline.segment(s)
        for j, n in enumerate(idx):
            out.append(ResidualBlock("flow", int(n), tuple(range(fr[j], fr[j] + k_r)),
                                     tuple(range(fv[j], fv[j] + k_v)),
                                     ("R_cb", "t_cb", "t_off"), self.huber["flow"]))
        return out


def _flow_terms(state: CalibrationState, flow: FlowFeatures, intr: CameraIntrinsics,
                jacobians: bool):
    """Per-feature predicted flow and (optionally) Jacobian pieces.

    Spline quantities are computed once per distinct frame time.
    """
    t_u, inv = np.unique(flow.t, return_inverse=True)
    s = t_u + state.t_off
    ev = state.rot_spline.evaluate_full(s, derivatives=2 if jacobians else 1,
                                        jacobians=jacobians)
    v_w = state.vel_spline.evaluate(s)
    R = ev.rotation[inv]
    w_b = ev.omega_body[inv]
    vw = v_w[inv]
    Rt_v = np.einsum("nji,nj->ni", R, vw)
    x1 = Rt_v + np.cross(w_b, state.t_cb)
    y1 = x1 @ state.R_cb
    y2 = w_b @ state.R_cb
    A, B = interaction_matrices(flow.uv, intr)
    Az = A / flow.depth[:, None, None]
    lin = np.einsum("nij,nj->ni", Az, y1)
    pred = lin + np.einsum("nij,nj->ni", B, y2)
    out = {"pred": pred, "lin": lin}
    if not jacobians:
        return out
    Rcb = state.R_cb
    J_x1 = Az @ Rcb.T
    J_eps = J_x1 @ hat(Rt_v)
    J_wb = -J_x1 @ hat(state.t_cb) + B @ Rcb.T
    J_vw = J_x1 @ np.swapaxes(R, -1, -2)
    a_w = state.vel_spline.derivative(s)[inv]
    alpha = ev.alpha_body[inv]
    out.update(
        J_eps=J_eps, J_wb=J_wb, J_vw=J_vw,
        J_tcb=J_x1 @ hat(w_b),
        J_Rcb=Az @ hat(y1) + B @ hat(y2),
        J_toff=(np.einsum("nij,nj->ni", J_eps, w_b) + np.einsum("nij,nj->ni", J_wb, alpha)
                + np.einsum("nij,nj->ni", J_vw, a_w)),
        rot_index=ev.index[inv], d_rot=ev.d_rot[inv], d_omega=ev.d_omega[inv],
    )
    i_v, W_v = state.vel_spline.basis_weights(s)
    out["vel_index"] = i_v[inv]
    out["vel_w"] = W_v[inv]
    return out


def flow_sigmas(state: CalibrationState, flow: FlowFeatures, intr: CameraIntrinsics,
                cfg: CalibConfig) -> np.ndarray:
    """Per-component sigma: pixel-velocity noise plus first-order depth noise."""
    lin = _flow_terms(state, flow, intr, jacobians=False)["lin"]
    n = cfg.noise
    return np.sqrt(n.sigma_pixel_vel**2 + (n.sigma_depth_rel * lin) ** 2)


def build_problem(state: CalibrationState, imu: ImuData, flow: FlowFeatures,
                  intr: CameraIntrinsics, cfg: CalibConfig) -> Problem:
    if len(imu) == 0:
        raise EmptyProblemError("no IMU samples for the gyro/accel families")
    if len(flow) == 0:
        raise EmptyProblemError("no pixel velocities for the flow family")
    keep = flow.depth > 0
    lo, hi = state.rot_spline.domain
    vlo, vhi = state.vel_spline.domain
    s = flow.t + state.t_off
    keep &= (s >= max(lo, vlo)) & (s < min(hi, vhi))
    keep &= (s >= imu.t[0]) & (s <= imu.t[-1])
    flow = flow.select(keep)
    if len(flow) == 0:
        raise EmptyProblemError("no pixel velocities inside the spline domain")

    rot_free = touched_control_points(state.rot_spline, imu.t)
    rot_free[state.anchor] = False
    vel_free = touched_control_points(state.vel_spline, imu.t)
    layout = ParameterLayout.build(rot_free, vel_free)
    sig = flow_sigmas(state, flow, intr, cfg)
    return Problem(imu, flow, intr, cfg, layout, sig, np.ones(len(flow), dtype=bool),
                   rot_free, vel_free)


# -- vectorized evaluation ------------------------------------------------------

@dataclass
class Linearization:
    residuals: dict[str, np.ndarray]          # whitened, (n, d) per family
    jacobian: sp.csr_matrix | None = None     # rows: gyro, accel, flow (active only)


def _imu_terms(state: CalibrationState, imu: ImuData, jacobians: bool):
    ev: So3Evaluation = state.rot_spline.evaluate_full(imu.t, derivatives=1,
                                                       jacobians=jacobians)
    R = ev.rotation
    a_w = state.vel_spline.derivative(imu.t)
    f_w = a_w - state.g_w
    f_b = np.einsum("nji,nj->ni", R, f_w)
    r_g = ev.omega_body + state.imu_intr.b_w - imu.gyro
    r_a = f_b + state.imu_intr.b_a - imu.accel
    return ev, R, f_b, r_g, r_a


def evaluate(problem: Problem, state: CalibrationState, jacobians: bool = True) -> Linearization:
    """Whitened residuals and, optionally, the whitened sparse Jacobian."""
    L = problem.layout
    sg = problem.sigma
    imu = problem.imu
    flow = problem.flow.select(problem.flow_active)
    fsig = problem.flow_sigma[problem.flow_active]
    ev, R, f_b, r_g, r_a = _imu_terms(state, imu, jacobians)
    ft = _flow_terms(state, flow, problem.intr, jacobians)
    r_f = (ft["pred"] - flow.flow) / fsig
    res = {"gyro": r_g / sg["gyro"], "accel": r_a / sg["accel"], "flow": r_f}
    if not jacobians:
        return Linearization(res)

    n = len(imu)
    m = len(flow)
    k_r = state.rot_spline.order
    k_v = state.vel_spline.order
    trip = []
    # gyro
    rows = np.arange(3 * n).reshape(n, 3)
    wg = 1.0 / sg["gyro"]
    for j in range(k_r):
        trip.append(block_triplets(rows, block_columns(L.rot_col[ev.index + j], 3),
                                   ev.d_omega[:, j] * wg))
    trip.append(block_triplets(rows, _fixed_cols(n, L.b_w, 3),
                               np.broadcast_to(np.eye(3) * wg, (n, 3, 3))))
    # accel
    rows = 3 * n + np.arange(3 * n).reshape(n, 3)
    wa = 1.0 / sg["accel"]
    J_eps = hat(f_b) * wa
    for j in range(k_r):
        trip.append(block_triplets(rows, block_columns(L.rot_col[ev.index + j], 3),
                                   J_eps @ ev.d_rot[:, j]))
    i_v, dW = state.vel_spline.basis_weights(imu.t, derivative=1)
    Rt = np.swapaxes(R, -1, -2) * wa
    for j in range(k_v):
        trip.append(block_triplets(rows, block_columns(L.vel_col[i_v + j], 3),
                                   Rt * dW[:, j, None, None]))
    T = sphere_basis(state.g_w)
    trip.append(block_triplets(rows, _fixed_cols(n, L.g, 2), Rt @ (hat(state.g_w) @ T)))
    trip.append(block_triplets(rows, _fixed_cols(n, L.b_a, 3),
                               np.broadcast_to(np.eye(3) * wa, (n, 3, 3))))
    # flow
    rows = 6 * n + np.arange(2 * m).reshape(m, 2)
    wf = (1.0 / fsig)[:, :, None]
    J_e = ft["J_eps"] * wf
    J_w = ft["J_wb"] * wf
    for j in range(k_r):
        trip.append(block_triplets(rows, block_columns(L.rot_col[ft["rot_index"] + j], 3),
                                   J_e @ ft["d_rot"][:, j] + J_w @ ft["d_omega"][:, j]))
    J_v = ft["J_vw"] * wf
    for j in range(k_v):
        trip.append(block_triplets(rows, block_columns(L.vel_col[ft["vel_index"] + j], 3),
                                   J_v * ft["vel_w"][:, j, None, None]))
    trip.append(block_triplets(rows, _fixed_cols(m, L.R_cb, 3), ft["J_Rcb"] * wf))
    trip.append(block_triplets(rows, _fixed_cols(m, L.t_cb, 3), ft["J_tcb"] * wf))
    trip.append(block_triplets(rows, _fixed_cols(m, L.t_off, 1), ft["J_toff"][:, :, None] * wf))
    J = assemble(trip, 6 * n + 2 * m, L.size)
    return Linearization(res, J)


def retract(problem: Problem, state: CalibrationState, dx: np.ndarray) -> CalibrationState:
    L = problem.layout
    cps = state.rot_spline.control_points.copy()
    free = problem.rot_free
    cps[free] = normalize_rotation(cps[free] @ exp_so3(dx[L.rot_col[free][:, None]
                                                          + np.arange(3)]))
    vcp = state.vel_spline.control_points.copy()
    vf = problem.vel_free
    vcp[vf] += dx[L.vel_col[vf][:, None] + np.arange(3)]
    nm = L.names()
    max_off = problem.cfg.max_time_offset
    t_off = float(np.clip(state.t_off + dx[nm["t_off"]][0], -max_off, max_off))
    return state.copy(
        rot_spline=state.rot_spline.with_control_points(cps),
        vel_spline=state.vel_spline.with_control_points(vcp),
        R_cb=normalize_rotation(state.R_cb @ exp_so3(dx[nm["R_cb"]])),
        t_cb=state.t_cb + dx[nm["t_cb"]],
        t_off=t_off,
        g_w=sphere_retract(state.g_w, dx[nm["g"]]),
        imu_intr=ImuIntrinsics(state.imu_intr.b_a + dx[nm["b_a"]],
                               state.imu_intr.b_w + dx[nm["b_w"]]),
    )


# -- solve ----------------------------------------------------------------------

def robust_cost(problem: Problem, lin: Linearization) -> float:
    h = problem.huber
    return float(sum(huber_cost(np.sum(lin.residuals[f] ** 2, axis=1), h[f]).sum()
                     for f in FAMILIES))


def _robust_system(problem: Problem, lin: Linearization):
    h = problem.huber
    w = np.concatenate([np.repeat(huber_weights(np.sum(lin.residuals[f] ** 2, axis=1), h[f]),
                                  lin.residuals[f].shape[1]) for f in FAMILIES])
    r = np.concatenate([lin.residuals[f].ravel() for f in FAMILIES])
    sw = np.sqrt(w)
    J = sp.diags(sw) @ lin.jacobian
    r = sw * r
    return J, r


def family_stats(problem: Problem, state: CalibrationState) -> dict[str, dict]:
    """Per-family mean/STD/RMS of raw (unwhitened) residual components."""
    lin = evaluate(problem, state, jacobians=False)
    out = {}
    fsig = problem.flow_sigma[problem.flow_active]
    for f in FAMILIES:
        raw = lin.residuals[f] * (fsig if f == "flow" else problem.sigma[f])
        out[f] = {"count": int(len(raw)), "mean": raw.mean(axis=0).tolist(),
                  "std": raw.std(axis=0).tolist(),
                  "rms": float(np.sqrt(np.mean(raw * raw))) if raw.size else 0.0}
    return out


def flow_residuals_raw(problem: Problem, state: CalibrationState) -> tuple[np.ndarray, np.ndarray]:
    """Camera times and raw flow residuals of the active flow blocks."""
    lin = evaluate(problem, state, jacobians=False)
    act = problem.flow_active
    return problem.flow.t[act], lin.residuals["flow"] * problem.flow_sigma[act]


@dataclass
class RoundReport:
    iterations: int
    initial_cost: float
    final_cost: float
    termination: str
    active_flow: int
    deltas: dict[str, float]
    cost_trace: list[float] = field(default_factory=list)


@dataclass
class SolveReport:
    rounds: list[RoundReport]
    residuals: dict[str, dict]
    gauge: dict

    @property
    def iterations(self) -> int:
        return sum(r.iterations for r in self.rounds)

    @property
    def initial_cost(self) -> float:
        return self.rounds[0].initial_cost

    @property
    def final_cost(self) -> float:
        return self.rounds[-1].final_cost

    @property
    def termination(self) -> str:
        return self.rounds[-1].termination


def _deltas(a: CalibrationState, b: CalibrationState) -> dict[str, float]:
    from .geometry import angle_between
    return {"R_cb_deg": float(np.degrees(angle_between(a.R_cb, b.R_cb))),
            "t_cb_m": float(np.linalg.norm(a.t_cb - b.t_cb)),
            "t_off_s": float(abs(a.t_off - b.t_off)),
            "g_deg": float(np.degrees(np.arccos(np.clip(
                a.g_w @ b.g_w / (np.linalg.norm(a.g_w) * np.linalg.norm(b.g_w)), -1, 1)))),
            "b_w": float(np.linalg.norm(a.imu_intr.b_w - b.imu_intr.b_w)),
            "b_a": float(np.linalg.norm(a.imu_intr.b_a - b.imu_intr.b_a))}


def _inner_solve(problem: Problem, state: CalibrationState, max_iter: int,
                 may_stall: bool = True, rel_tol: float = 1e-10, grad_tol: float = 1e-8,
                 step_tol: float = 1e-12):
    lin = evaluate(problem, state)
    cost = robust_cost(problem, lin)
    initial = cost
    trace = [cost]
    lam = 1e-4
    accepted = 0
    reason = "max_iterations"
    it = 0
    for it in range(1, max_iter + 1):
        J, r = _robust_system(problem, lin)
        g = J.T @ r
        if np.linalg.norm(g) < grad_tol:
            reason = "gradient"
            it -= 1
            break
        H = (J.T @ J).tocsc()
        step_ok = False
        while lam <= 1e10:
            dx = solve_normal(H, g, lam)
            cand = retract(problem, state, dx)
            c_lin = evaluate(problem, cand, jacobians=False)
            c_cost = robust_cost(problem, c_lin)
            if np.isfinite(c_cost) and c_cost <= cost:
                step_ok = True
                break
            lam *= 10.0
        if not step_ok:
            if may_stall and accepted == 0 and cost > 1e-12:
                report = RoundReport(it, initial, cost, "stalled", int(problem.flow_active.sum()),
                                     {}, trace)
                raise StalledSolveError(
                    f"cost {cost:.6g} did not decrease after damping escalation",
                    SolveReport([report], {}, {}))
            reason = "no_decrease"
            break
        accepted += 1
        lam = max(lam / 10.0, 1e-12)
        rel = (cost - c_cost) / max(cost, 1e-300)
        state, cost = cand, c_cost
        trace.append(cost)
        log.debug("batch it %d: cost %.9g lam %.1g", it, cost, lam)
        if rel < rel_tol:
            reason = "relative_decrease"
            break
        if np.abs(dx).max() < step_tol:
            reason = "step"
            break
        if cost < 1e-24:
            reason = "zero_cost"
            break
        lin = evaluate(problem, state)
    return state, RoundReport(it, initial, cost, reason, int(problem.flow_active.sum()), {},
                              trace)


def regate_flow(problem: Problem, state: CalibrationState) -> int:
    """Deactivate flow blocks whose whitened norm exceeds the flow threshold."""
    problem.flow_active[:] = True
    lin = evaluate(problem, state, jacobians=False)
    norm = np.linalg.norm(lin.residuals["flow"], axis=1)
    problem.flow_active[:] = norm <= problem.huber["flow"]
    return int((~problem.flow_active).sum())


def yaw_gauge_direction(problem: Problem, state: CalibrationState) -> np.ndarray:
    """Parameter-space direction of a world rotation about gravity, including
    the anchored control point (not representable in the reduced layout)."""
    gh = state.g_w / np.linalg.norm(state.g_w)
    cps = state.rot_spline.control_points
    d_rot = np.einsum("nji,j->ni", cps, gh)
    d_vel = np.cross(gh, state.vel_spline.control_points)
    return np.concatenate([d_rot.ravel(), d_vel.ravel()])


def gauge_report(problem: Problem, state: CalibrationState) -> dict:
    """Curvature of the cost along the yaw-about-gravity direction.

    With every rotation control point free the direction is an exact null
    space. Holding the anchor fixed removes it; the curvature left along the
    direction (restricted to the free parameters) is reported next to the
    typical normal-matrix diagonal so a near-singular gauge shows up.
    """
    lin = evaluate(problem, state)
    J, _ = _robust_system(problem, lin)
    u = yaw_gauge_direction(problem, state)
    nr = state.rot_spline.num_control_points
    L = problem.layout
    u_rot = u[:3 * nr].reshape(nr, 3)
    u_vel = u[3 * nr:].reshape(-1, 3)
    x = np.zeros(L.size)
    rf, vf = problem.rot_free, problem.vel_free
    x[(L.rot_col[rf][:, None] + np.arange(3)).ravel()] = u_rot[rf].ravel()
    x[(L.vel_col[vf][:, None] + np.arange(3)).ravel()] = u_vel[vf].ravel()
    diag = sp.csr_matrix(J.T @ J).diagonal()
    curv_reduced = float(np.linalg.norm(J @ x) ** 2 / max(x @ x, 1e-300))
    typical = float(np.median(diag[diag > 0])) if np.any(diag > 0) else 0.0
    ratio = curv_reduced / typical if typical > 0 else 0.0
    return {"direction": "yaw_about_gravity",
            "curvature_reduced": curv_reduced,
            "median_diagonal": typical,
            "relative_curvature": ratio,
            "fixed_by_anchor": bool(ratio > 1e-9)}


def solve(problem: Problem, state: CalibrationState, cfg: CalibConfig | None = None,
          on_round: Callable[[int, CalibrationState], None] | None = None
          ) -> tuple[CalibrationState, SolveReport]:
    """Outer rounds of robust LM; ``on_round(k, state)`` sees each round's result."""
    cfg = problem.cfg if cfg is None else cfg
    rounds = []
    for k in range(cfg.outer_rounds):
        if k > 0:
            dropped = regate_flow(problem, state)
            log.info("round %d: %d flow blocks re-gated out", k + 1, dropped)
        before = state
        state, rep = _inner_solve(problem, state, cfg.max_iterations, may_stall=k == 0)
        rep.deltas = _deltas(before, state)
        rounds.append(rep)
        log.info("round %d: cost %.6g -> %.6g in %d iterations (%s)", k + 1,
                 rep.initial_cost, rep.final_cost, rep.iterations, rep.termination)
        if on_round is not None:
            on_round(k, state)
    return state, SolveReport(rounds, family_stats(problem, state), gauge_report(problem, state))
