"""SO(3) primitives shared by every other module.

Rotations are stored as ``(..., 3, 3)`` float arrays and tangent vectors as
``(..., 3)`` arrays; every function broadcasts over leading axes so the
solver can evaluate thousands of residuals in one call.

Conventions:
    - ``exp_so3(phi)`` is the Rodrigues map, ``log_so3`` its principal inverse
      with ``|phi| <= pi``.
    - Perturbations are applied on the right: ``R <- R @ exp_so3(delta)``.
    - At exactly ``pi`` the logarithm returns the axis whose largest
      component is positive, e.g. a half turn about z maps to ``(0, 0, +pi)``.
"""

from __future__ import annotations

import numpy as np

_SMALL_ANGLE = 1e-8
# below this sin(theta) (with cos(theta) < 0) the axis is read from the
# symmetric part of R instead of the vanishing antisymmetric part
_NEAR_PI_SIN = 0.5


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix with ``hat(v) @ w == cross(v, w)``."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def _angle(phi: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("...i,...i->...", phi, phi))


def exp_so3(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = _angle(phi)
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    K = hat(phi)
    K2 = K @ K
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * K2


def log_so3(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    w = 0.5 * vee(R - np.swapaxes(R, -1, -2))
    s = _angle(w)
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(s, c)

    small = theta < _SMALL_ANGLE
    safe_s = np.where(s > 0.0, s, 1.0)
    gain = np.where(small, 1.0 + theta * theta / 6.0, theta / safe_s)
    out = gain[..., None] * w

    near_pi = (c < 0.0) & (s < _NEAR_PI_SIN)
    if np.any(near_pi):
        Rn = R[near_pi]
        wn = w[near_pi]
        cn = c[near_pi]
        tn = theta[near_pi]
        B = 0.5 * (Rn + np.swapaxes(Rn, -1, -2)) - cn[:, None, None] * np.eye(3)
        B /= (1.0 - cn)[:, None, None]
        diag = np.diagonal(B, axis1=-2, axis2=-1)
        idx = np.argmax(diag, axis=-1)
        rows = np.arange(len(idx))
        col = B[rows, :, idx]
        axis = col / np.sqrt(np.maximum(diag[rows, idx], 1e-300))[:, None]
        axis /= _angle(axis)[:, None]
        sign = np.sign(np.einsum("ni,ni->n", axis, wn))
        sign[sign == 0.0] = 1.0
        out[near_pi] = (sign * tn)[:, None] * axis
    return out


def _jacobian_coeffs(theta: np.ndarray):
    small = theta < 1e-5
    safe = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    b = np.where(small, 1.0 / 6.0 - t2 / 120.0, (safe - np.sin(safe)) / safe**3)
    return a, b


def right_jacobian(phi: np.ndarray) -> np.ndarray:
    """Jr with ``exp(phi + d) ~= exp(phi) @ exp(Jr(phi) @ d)``."""
    phi = np.asarray(phi, dtype=float)
    a, b = _jacobian_coeffs(_angle(phi))
    K = hat(phi)
    return np.eye(3) - a[..., None, None] * K + b[..., None, None] * (K @ K)


def left_jacobian(phi: np.ndarray) -> np.ndarray:
    return right_jacobian(-np.asarray(phi, dtype=float))


def right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = _angle(phi)
    small = theta < 1e-5
    safe = np.where(small, 1.0, theta)
    c = np.where(
        small,
        1.0 / 12.0 + theta * theta / 720.0,
        1.0 / (safe * safe) - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(safe)),
    )
    K = hat(phi)
    return np.eye(3) + 0.5 * K + c[..., None, None] * (K @ K)


def left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    return right_jacobian_inv(-np.asarray(phi, dtype=float))


def normalize_rotation(R: np.ndarray) -> np.ndarray:
    """Project onto SO(3) (closest rotation in Frobenius norm)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.ones(U.shape[:-2] + (3,))
    D[..., 2] = d
    return (U * D[..., None, :]) @ Vt


def compose(*rotations: np.ndarray) -> np.ndarray:
    """Product of rotations, renormalized to stay on SO(3)."""
    out = np.eye(3)
    for R in rotations:
        out = out @ R
    return normalize_rotation(out)


def rotation_angle(R: np.ndarray) -> np.ndarray:
    return _angle(log_so3(R))


def angle_between(Ra: np.ndarray, Rb: np.ndarray) -> np.ndarray:
    """Geodesic distance (rad) between two rotations."""
    return rotation_angle(np.swapaxes(Ra, -1, -2) @ Rb)


def to_quaternion(R: np.ndarray) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0``."""
    phi = log_so3(R)
    theta = _angle(phi)
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    k = np.where(small, 0.5 - theta * theta / 48.0, np.sin(0.5 * safe) / safe)
    q = np.concatenate([np.cos(0.5 * theta)[..., None], k[..., None] * phi], axis=-1)
    return q


def from_quaternion(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def euler_zyx(R: np.ndarray) -> np.ndarray:
    """Intrinsic Z-Y-X angles ``(yaw, pitch, roll)`` in radians.

    ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``. Reporting only; nothing in the
    estimator works in Euler angles.
    """
    R = np.asarray(R, dtype=float)
    pitch = np.arcsin(np.clip(-R[..., 2, 0], -1.0, 1.0))
    yaw = np.arctan2(R[..., 1, 0], R[..., 0, 0])
    roll = np.arctan2(R[..., 2, 1], R[..., 2, 2])
    return np.stack([yaw, pitch, roll], axis=-1)


def rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def sphere_basis(g: np.ndarray) -> np.ndarray:
    """3x2 orthonormal basis of the plane orthogonal to ``g``."""
    n = np.asarray(g, dtype=float) / np.linalg.norm(g)
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    b1 = np.cross(n, helper)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(n, b1)
    return np.stack([b1, b2], axis=1)


def sphere_retract(g: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Move ``g`` on its sphere by tangent coordinates ``delta`` (2,)."""
    g = np.asarray(g, dtype=float)
    step = sphere_basis(g) @ np.asarray(delta, dtype=float)
    out = exp_so3(step) @ g
    return out * (np.linalg.norm(g) / np.linalg.norm(out))
