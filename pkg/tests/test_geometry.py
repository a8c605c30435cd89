import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from velocal.geometry import (angle_between, euler_zyx, exp_so3, from_quaternion, hat,
                              left_jacobian, left_jacobian_inv, log_so3, normalize_rotation,
                              right_jacobian, right_jacobian_inv, rot_x, rot_y, rot_z,
                              sphere_basis, sphere_retract, to_quaternion, vee)

finite = st.floats(-1e3, 1e3, allow_nan=False)
vec3 = arrays(np.float64, 3, elements=finite)
# rotation vectors strictly inside the principal ball, so Log(Exp(phi)) = phi
ball = arrays(np.float64, 3, elements=st.floats(-1.8, 1.8))


def test_hat_vee_cross():
    a = np.array([0.3, -1.2, 2.0])
    b = np.array([-0.7, 0.1, 0.4])
    np.testing.assert_allclose(hat(a) @ b, np.cross(a, b), atol=1e-15)
    np.testing.assert_array_equal(vee(hat(a)), a)


@given(ball)
def test_exp_log_round_trip(phi):
    np.testing.assert_allclose(log_so3(exp_so3(phi)), phi, atol=1e-10)


@given(vec3)
def test_exp_is_rotation(phi):
    R = exp_so3(phi)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("theta", [0.0, 1e-12, 1e-9, 1e-6, 1e-3])
def test_small_angle_branches(theta):
    axis = np.array([1.0, -2.0, 0.5]) / np.linalg.norm([1.0, -2.0, 0.5])
    phi = theta * axis
    R = exp_so3(phi)
    expected = np.eye(3) + hat(phi) + 0.5 * hat(phi) @ hat(phi)
    # the second-order series truncates at theta^3 / 6
    np.testing.assert_allclose(R, expected, atol=1e-15 + theta**3 / 6)
    np.testing.assert_allclose(log_so3(R), phi, atol=1e-15)


@pytest.mark.parametrize("eps", [0.0, 1e-9, 1e-6, 1e-3])
def test_log_near_pi(eps):
    axis = np.array([0.2, 0.9, -0.4])
    axis /= np.linalg.norm(axis)
    phi = (np.pi - eps) * axis
    out = log_so3(exp_so3(phi))
    if eps == 0.0:
        # at exactly pi, +axis and -axis are the same rotation
        assert min(np.linalg.norm(out - phi), np.linalg.norm(out + phi)) < 1e-7
    else:
        np.testing.assert_allclose(out, phi, atol=1e-7)


def test_batched_shapes():
    phi = np.random.default_rng(0).normal(size=(4, 5, 3))
    R = exp_so3(phi)
    assert R.shape == (4, 5, 3, 3)
    for idx in np.ndindex(4, 5):
        np.testing.assert_allclose(R[idx], exp_so3(phi[idx]), atol=1e-15)
    assert log_so3(R).shape == (4, 5, 3)


@given(ball, arrays(np.float64, 3, elements=st.floats(-1, 1)))
@settings(max_examples=50)
def test_right_jacobian_first_order(phi, d):
    h = 1e-6
    lhs = exp_so3(phi + h * d)
    rhs = exp_so3(phi) @ exp_so3(h * right_jacobian(phi) @ d)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)
    lhs_l = exp_so3(h * left_jacobian(phi) @ d) @ exp_so3(phi)
    np.testing.assert_allclose(lhs, lhs_l, atol=1e-10)


@given(ball)
@settings(max_examples=50)
def test_jacobian_inverses(phi):
    np.testing.assert_allclose(right_jacobian(phi) @ right_jacobian_inv(phi), np.eye(3),
                               atol=1e-9)
    np.testing.assert_allclose(left_jacobian(phi) @ left_jacobian_inv(phi), np.eye(3),
                               atol=1e-9)


@given(vec3)
def test_quaternion_round_trip(phi):
    R = exp_so3(phi)
    q = to_quaternion(R)
    assert q[0] >= 0
    assert np.linalg.norm(q) == pytest.approx(1.0)
    np.testing.assert_allclose(from_quaternion(q), R, atol=1e-12)


def test_euler_zyx_convention():
    yaw, pitch, roll = 0.4, -0.3, 0.2
    R = rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)
    np.testing.assert_allclose(euler_zyx(R), [yaw, pitch, roll], atol=1e-14)


def test_normalize_and_angle():
    R = exp_so3(np.array([0.1, 0.2, 0.3]))
    noisy = R + 1e-6 * np.arange(9).reshape(3, 3)
    Rn = normalize_rotation(noisy)
    np.testing.assert_allclose(Rn @ Rn.T, np.eye(3), atol=1e-14)
    assert np.degrees(angle_between(R, R @ rot_z(np.radians(3.0)))) == pytest.approx(3.0)


@given(arrays(np.float64, 3, elements=st.floats(-10, 10)).filter(lambda g: np.linalg.norm(g) > 0.1),
       arrays(np.float64, 2, elements=st.floats(-0.5, 0.5)))
def test_sphere_retraction_keeps_norm(g, delta):
    T = sphere_basis(g)
    np.testing.assert_allclose(T.T @ T, np.eye(2), atol=1e-12)
    np.testing.assert_allclose(T.T @ g, 0.0, atol=1e-12 * np.linalg.norm(g))
    g2 = sphere_retract(g, delta)
    assert np.linalg.norm(g2) == pytest.approx(np.linalg.norm(g), rel=1e-12)
    ang = np.arctan2(np.linalg.norm(np.cross(g, g2)), g @ g2)
    assert ang == pytest.approx(np.linalg.norm(delta), abs=1e-9)
