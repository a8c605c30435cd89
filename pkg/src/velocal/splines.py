"""Uniform cumulative B-splines on R^3 and SO(3).

Knot convention: control point ``i`` is anchored at ``start_time + i * dt``.
A query time ``t`` falls in segment ``i = floor((t - start_time) / dt)`` and
is influenced by control points ``i .. i + k - 1`` with normalized time
``u = (t - start_time) / dt - i``. The valid domain is the half-open interval
``[start_time, start_time + (N - k + 1) * dt)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .geometry import exp_so3, hat, log_so3, right_jacobian, right_jacobian_inv


class SplineDomainError(ValueError):
    """Query time outside the spline's valid interval."""

    def __init__(self, interval: tuple[float, float], bad: np.ndarray):
        self.interval = interval
        self.bad = np.atleast_1d(bad)
        super().__init__(
            f"time(s) {self.bad[:3].tolist()} outside spline domain "
            f"[{interval[0]:.6f}, {interval[1]:.6f})"
        )


@lru_cache(maxsize=None)
def cumulative_matrix(order: int) -> np.ndarray:
    """Cumulative blending matrix; ``lambda(u) = M @ [1, u, ..., u^(k-1)]``."""
    k = order
    blend = np.zeros((k, k))
    for j in range(k):
        for n in range(k):
            acc = 0.0
            for s in range(j, k):
                acc += (-1) ** (s - j) * math.comb(k, s - j) * (k - s - 1) ** (k - 1 - n)
            blend[j, n] = math.comb(k - 1, k - 1 - n) * acc / math.factorial(k - 1)
    cum = np.cumsum(blend[::-1], axis=0)[::-1]
    cum.setflags(write=False)
    return cum


def cumulative_basis(u: np.ndarray, order: int, derivative: int = 0) -> np.ndarray:
    """Cumulative basis ``lambda_j(u)`` (or its u-derivative), shape (n, k)."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    k = order
    powers = np.zeros((u.size, k))
    for p in range(derivative, k):
        coef = math.perm(p, derivative)
        powers[:, p] = coef * u ** (p - derivative)
    return powers @ cumulative_matrix(k).T


@dataclass(frozen=True)
class _UniformSpline:
    order: int
    start_time: float
    knot_spacing: float
    control_points: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not 2 <= self.order <= 6:
            raise ValueError(f"spline order must be in 2..6, got {self.order}")
        if not self.knot_spacing > 0:
            raise ValueError("knot_spacing must be positive")
        if len(self.control_points) < self.order:
            raise ValueError(
                f"need at least {self.order} control points, got {len(self.control_points)}"
            )

    @property
    def num_control_points(self) -> int:
        return len(self.control_points)

    @property
    def end_time(self) -> float:
        return self.start_time + (self.num_control_points - self.order + 1) * self.knot_spacing

    @property
    def domain(self) -> tuple[float, float]:
        return (self.start_time, self.end_time)

    def in_domain(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return (t >= self.start_time) & (t < self.end_time)

    def segment(self, t) -> tuple[np.ndarray, np.ndarray]:
        """Segment index and normalized time for each query."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        ok = self.in_domain(t)
        if not np.all(ok):
            raise SplineDomainError(self.domain, t[~ok])
        s = (t - self.start_time) / self.knot_spacing
        i = np.floor(s).astype(int)
        i = np.minimum(i, self.num_control_points - self.order)
        return i, s - i

    def involved_knots(self, t: float) -> range:
        i, _ = self.segment(t)
        return range(int(i[0]), int(i[0]) + self.order)

    def lambdas(self, t, derivative: int = 0):
        i, u = self.segment(t)
        lam = cumulative_basis(u, self.order, derivative) / self.knot_spacing**derivative
        return i, lam


def _num_points(t0: float, t1: float, dt: float, order: int) -> int:
    segments = int(math.floor((t1 - t0) / dt)) + 1
    return segments + order - 1


@dataclass(frozen=True)
class R3Spline(_UniformSpline):
    """Cumulative B-spline of 3-vectors (world-frame velocity here)."""

    @classmethod
    def covering(cls, t0: float, t1: float, dt: float, order: int = 4, pad: float = 0.0,
                 value=None) -> "R3Spline":
        start = t0 - pad
        n = _num_points(start, t1 + pad, dt, order)
        cps = np.zeros((n, 3)) if value is None else np.tile(np.asarray(value, float), (n, 1))
        return cls(order, start, dt, cps)

    def with_control_points(self, cps: np.ndarray) -> "R3Spline":
        return R3Spline(self.order, self.start_time, self.knot_spacing, np.asarray(cps, float))

    def basis_weights(self, t, derivative: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Weights of control points ``i .. i+k-1``; the spline is linear in them."""
        i, lam = self.lambdas(t, derivative)
        w = np.empty_like(lam)
        w[:, :-1] = lam[:, :-1] - lam[:, 1:]
        w[:, -1] = lam[:, -1]
        return i, w

    def evaluate(self, t) -> np.ndarray:
        """Cumulative form ``v_i + sum_j lambda_j (v_{i+j} - v_{i+j-1})``."""
        scalar = np.ndim(t) == 0
        i, lam = self.lambdas(t)
        out = self._cumulative(i, lam, base=True)
        return out[0] if scalar else out

    def derivative(self, t, order: int = 1) -> np.ndarray:
        if order not in (1, 2):
            raise ValueError("derivative order must be 1 or 2")
        scalar = np.ndim(t) == 0
        i, lam = self.lambdas(t, order)
        out = self._cumulative(i, lam, base=False)
        return out[0] if scalar else out

    def _cumulative(self, i, lam, base: bool) -> np.ndarray:
        cps = self.control_points
        out = cps[i].copy() if base else np.zeros((len(i), 3))
        for j in range(1, self.order):
            out += lam[:, j, None] * (cps[i + j] - cps[i + j - 1])
        return out


@dataclass
class So3Evaluation:
    """Batched SO(3) spline evaluation with optional derivatives/Jacobians.

    ``d_rot[n, m]`` maps a right perturbation of control point ``index[n] + m``
    to the right perturbation of ``rotation[n]``; ``d_omega`` does the same for
    the body-frame angular velocity.
    """

    index: np.ndarray
    rotation: np.ndarray
    omega_body: np.ndarray | None = None
    alpha_body: np.ndarray | None = None
    d_rot: np.ndarray | None = None
    d_omega: np.ndarray | None = None

    @property
    def omega_world(self) -> np.ndarray:
        return np.einsum("nij,nj->ni", self.rotation, self.omega_body)


@dataclass(frozen=True)
class So3Spline(_UniformSpline):
    """Cumulative B-spline on SO(3); control points are (N, 3, 3) matrices."""

    @classmethod
    def covering(cls, t0: float, t1: float, dt: float, order: int = 4,
                 pad: float = 0.0) -> "So3Spline":
        start = t0 - pad
        n = _num_points(start, t1 + pad, dt, order)
        return cls(order, start, dt, np.tile(np.eye(3), (n, 1, 1)))

    def with_control_points(self, cps: np.ndarray) -> "So3Spline":
        return So3Spline(self.order, self.start_time, self.knot_spacing, np.asarray(cps, float))

    def increments(self) -> np.ndarray:
        """``Log(R_{m}^T R_{m+1})`` for every consecutive control-point pair."""
        cps = self.control_points
        return log_so3(np.swapaxes(cps[:-1], -1, -2) @ cps[1:])

    def evaluate(self, t) -> np.ndarray:
        scalar = np.ndim(t) == 0
        R = self.evaluate_full(t, derivatives=0).rotation
        return R[0] if scalar else R

    def angular_velocity(self, t) -> np.ndarray:
        """World-frame angular velocity (``dR/dt = hat(omega_world) @ R``)."""
        scalar = np.ndim(t) == 0
        w = self.evaluate_full(t, derivatives=1).omega_world
        return w[0] if scalar else w

    def body_angular_velocity(self, t) -> np.ndarray:
        scalar = np.ndim(t) == 0
        w = self.evaluate_full(t, derivatives=1).omega_body
        return w[0] if scalar else w

    def evaluate_full(self, t, derivatives: int = 1, jacobians: bool = False,
                      increments: np.ndarray | None = None) -> So3Evaluation:
        k = self.order
        i, u = self.segment(t)
        n = len(i)
        dt = self.knot_spacing
        lam = cumulative_basis(u, k, 0)
        cps = self.control_points
        inc = self.increments() if increments is None else increments

        d = [None] + [inc[i + j - 1] for j in range(1, k)]
        A = [None] + [exp_so3(lam[:, j, None] * d[j]) for j in range(1, k)]

        # suffix products P_j = A_{j+1} ... A_{k-1}
        P = [None] * k
        P[k - 1] = np.broadcast_to(np.eye(3), (n, 3, 3))
        for j in range(k - 2, -1, -1):
            P[j] = A[j + 1] @ P[j + 1]
        R = cps[i] @ P[0]
        out = So3Evaluation(index=i, rotation=R)
        if derivatives == 0 and not jacobians:
            return out

        dlam = cumulative_basis(u, k, 1) / dt
        ddlam = cumulative_basis(u, k, 2) / dt**2 if derivatives >= 2 else None
        omega = np.zeros((n, 3))
        alpha = np.zeros((n, 3))
        omega_prev = [None] * k
        for j in range(1, k):
            At = np.swapaxes(A[j], -1, -2)
            omega_prev[j] = omega
            rot_prev = np.einsum("nij,nj->ni", At, omega)
            if ddlam is not None:
                alpha = (np.einsum("nij,nj->ni", At, alpha)
                         - np.cross(dlam[:, j, None] * d[j], rot_prev)
                         + ddlam[:, j, None] * d[j])
            omega = rot_prev + dlam[:, j, None] * d[j]
        out.omega_body = omega
        if ddlam is not None:
            out.alpha_body = alpha
        if not jacobians:
            return out

        d_rot = np.zeros((n, k, 3, 3))
        d_omega = np.zeros((n, k, 3, 3))
        d_rot[:, 0] = np.swapaxes(P[0], -1, -2)
        eye = np.eye(3)
        for j in range(1, k):
            Pt = np.swapaxes(P[j], -1, -2)
            lj = lam[:, j, None, None]
            x_rot = Pt @ (lj * right_jacobian(lam[:, j, None] * d[j]))
            g = (lj * (np.swapaxes(A[j], -1, -2) @ hat(omega_prev[j])
                       @ right_jacobian(-lam[:, j, None] * d[j]))
                 + dlam[:, j, None, None] * eye)
            x_om = Pt @ g
            jr_inv = right_jacobian_inv(d[j])
            jl_inv = right_jacobian_inv(-d[j])
            d_rot[:, j] += x_rot @ jr_inv
            d_rot[:, j - 1] -= x_rot @ jl_inv
            d_omega[:, j] += x_om @ jr_inv
            d_omega[:, j - 1] -= x_om @ jl_inv
        out.d_rot = d_rot
        out.d_omega = d_omega
        return out
