"""Pinhole camera, first-order optical flow, IMU model and pixel-velocity
differentiation.

All functions accept either single values or stacked arrays (leading batch
axis) so the same code serves the per-feature API and the vectorized solver.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np


class ProjectionError(ValueError):
    """Point at non-positive depth."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")

    def contains(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return ((uv[..., 0] >= 0) & (uv[..., 0] < self.width)
                & (uv[..., 1] >= 0) & (uv[..., 1] < self.height))


@dataclass(frozen=True)
class ImuIntrinsics:
    b_a: np.ndarray
    b_w: np.ndarray

    @classmethod
    def zero(cls) -> "ImuIntrinsics":
        return cls(np.zeros(3), np.zeros(3))


class ImuMeasurement(NamedTuple):
    t: float
    gyro: np.ndarray
    accel: np.ndarray


class FeatureObservation(NamedTuple):
    t: float
    u: float
    v: float
    depth: float


class PixelVelocity(NamedTuple):
    t: float
    du: float
    dv: float


class InteractionMatrices(NamedTuple):
    A: np.ndarray
    B: np.ndarray


def _check_depth(z):
    if np.any(np.asarray(z) <= 0):
        raise ProjectionError("depth must be positive")


def project(point: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    p = np.asarray(point, dtype=float)
    _check_depth(p[..., 2])
    u = intr.fx * p[..., 0] / p[..., 2] + intr.cx
    v = intr.fy * p[..., 1] / p[..., 2] + intr.cy
    return np.stack([u, v], axis=-1)


def back_project(pixel: np.ndarray, depth, intr: CameraIntrinsics) -> np.ndarray:
    uv = np.asarray(pixel, dtype=float)
    z = np.asarray(depth, dtype=float)
    _check_depth(z)
    x = (uv[..., 0] - intr.cx) / intr.fx * z
    y = (uv[..., 1] - intr.cy) / intr.fy * z
    return np.stack([x, y, np.broadcast_to(z, x.shape)], axis=-1)


def interaction_matrices(pixel: np.ndarray, intr: CameraIntrinsics) -> InteractionMatrices:
    """Linear maps from camera linear (A, scaled by 1/z) and angular (B)
    velocity to pixel velocity."""
    uv = np.asarray(pixel, dtype=float)
    up = uv[..., 0] - intr.cx
    vp = uv[..., 1] - intr.cy
    fx, fy = intr.fx, intr.fy
    shape = up.shape + (2, 3)
    A = np.zeros(shape)
    A[..., 0, 0] = -fx
    A[..., 0, 2] = up
    A[..., 1, 1] = -fy
    A[..., 1, 2] = vp
    B = np.empty(shape)
    B[..., 0, 0] = up * vp / fy
    B[..., 0, 1] = -fx - up * up / fx
    B[..., 0, 2] = fx * vp / fy
    B[..., 1, 0] = fy + vp * vp / fy
    B[..., 1, 1] = -up * vp / fx
    B[..., 1, 2] = -fy * up / fx
    return InteractionMatrices(A, B)


def optical_flow(pixel, depth, v_c, w_c, intr: CameraIntrinsics) -> np.ndarray:
    """Pixel velocity (px/s) of a static landmark seen by a moving camera.

    ``v_c`` and ``w_c`` are the camera's own linear/angular velocity in the
    camera frame.
    """
    z = np.asarray(depth, dtype=float)
    _check_depth(z)
    A, B = interaction_matrices(pixel, intr)
    v_c = np.asarray(v_c, dtype=float)
    w_c = np.asarray(w_c, dtype=float)
    return (np.einsum("...ij,...j->...i", A, v_c) / z[..., None]
            + np.einsum("...ij,...j->...i", B, w_c))


def lagrange_derivative(times: Sequence[float], values: np.ndarray, at: float) -> np.ndarray:
    """Derivative of the Lagrange interpolant through ``(times, values)``."""
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    n = len(t)
    if len(np.unique(t)) != n:
        raise ValueError("duplicate timestamps in Lagrange window")
    out = np.zeros(y.shape[1:])
    for i in range(n):
        dl = 0.0
        for m in range(n):
            if m == i:
                continue
            term = 1.0 / (t[i] - t[m])
            for j in range(n):
                if j != i and j != m:
                    term *= (at - t[j]) / (t[i] - t[j])
            dl += term
        out = out + dl * y[i]
    return out


def three_point_weights(t0, t1, t2) -> np.ndarray:
    """Weights ``w`` with ``y'(t1) ~= w0*y0 + w1*y1 + w2*y2``; broadcasts."""
    t0, t1, t2 = (np.asarray(x, dtype=float) for x in (t0, t1, t2))
    if np.any((t1 <= t0) | (t2 <= t1)):
        raise ValueError("Lagrange window needs strictly increasing timestamps")
    w0 = (t1 - t2) / ((t0 - t1) * (t0 - t2))
    w1 = 1.0 / (t1 - t0) + 1.0 / (t1 - t2)
    w2 = (t1 - t0) / ((t2 - t0) * (t2 - t1))
    return np.stack([w0, w1, w2], axis=-1)


def pixel_velocity_lagrange(window: Sequence[FeatureObservation]) -> PixelVelocity:
    """Pixel velocity at the middle of three consecutive observations."""
    if len(window) != 3:
        raise ValueError("Lagrange window needs exactly 3 observations")
    t = [o.t for o in window]
    if len(set(t)) != 3:
        raise ValueError("duplicate timestamps in Lagrange window")
    w = three_point_weights(*t)
    du = sum(wi * o.u for wi, o in zip(w, window))
    dv = sum(wi * o.v for wi, o in zip(w, window))
    return PixelVelocity(t[1], float(du), float(dv))


def imu_measure(accel, gyro, intr: ImuIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Noiseless additive-bias model: ``(a + b_a, w + b_w)``."""
    return (np.asarray(accel, dtype=float) + intr.b_a,
            np.asarray(gyro, dtype=float) + intr.b_w)


@dataclass(frozen=True)
class ImuData:
    """Stacked IMU stream: ``t`` (n,), ``gyro`` (n, 3), ``accel`` (n, 3)."""

    t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        if len(self.t) and np.any(np.diff(self.t) <= 0):
            raise ValueError("IMU timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.t)

    def measurements(self) -> list[ImuMeasurement]:
        return [ImuMeasurement(float(t), g, a) for t, g, a in zip(self.t, self.gyro, self.accel)]

    @classmethod
    def from_measurements(cls, items: Sequence[ImuMeasurement]) -> "ImuData":
        return cls(np.array([m.t for m in items], dtype=float),
                   np.array([m.gyro for m in items], dtype=float).reshape(-1, 3),
                   np.array([m.accel for m in items], dtype=float).reshape(-1, 3))

    def span(self) -> float:
        return float(self.t[-1] - self.t[0]) if len(self.t) > 1 else 0.0

    def select(self, mask) -> "ImuData":
        return ImuData(self.t[mask], self.gyro[mask], self.accel[mask])
