import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import central_difference, pose_difference, random_pose, rel_err
from plba import se3
from plba.errors import BehindCameraError, InvalidArgumentError, InvalidDepthError

K500 = se3.CameraIntrinsics(500.0, 500.0, 320.0, 240.0)


def rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def twist_matrix(xi):
    T = np.zeros((4, 4))
    T[:3, :3] = se3.hat(xi[3:])
    T[:3, 3] = xi[:3]
    return T


def tangents(max_angle):
    def scale(v):
        rho, phi = v[:3], v[3:]
        n = np.linalg.norm(phi)
        if n > max_angle:
            phi = phi * (max_angle / n)
        return np.concatenate([rho, phi])

    return arrays(np.float64, 6, elements=st.floats(-4, 4)).map(scale)


def test_exp_zero_is_identity():
    p = se3.exp(np.zeros(6))
    np.testing.assert_array_equal(p.R, np.eye(3))
    np.testing.assert_array_equal(p.t, np.zeros(3))


def test_exp_pure_translation():
    p = se3.exp([1, 2, 3, 0, 0, 0])
    np.testing.assert_array_equal(p.R, np.eye(3))
    np.testing.assert_allclose(p.t, [1, 2, 3])


def test_exp_rejects_non_finite():
    with pytest.raises(InvalidArgumentError):
        se3.exp([0, 0, np.nan, 0, 0, 0])
    with pytest.raises(InvalidArgumentError):
        se3.exp([0, 0, 0, np.inf, 0, 0])


def test_exp_log_round_trip_at_07():
    rng = np.random.default_rng(0)
    for _ in range(50):
        phi = rng.normal(size=3)
        xi = np.concatenate([rng.normal(size=3), 0.7 * phi / np.linalg.norm(phi)])
        np.testing.assert_allclose(se3.log(se3.exp(xi)), xi, atol=1e-10)


@settings(max_examples=200, deadline=None)
@given(tangents(3.0))
def test_exp_matches_matrix_exponential(xi):
    T = scipy.linalg.expm(twist_matrix(xi))
    p = se3.exp(xi)
    np.testing.assert_allclose(p.R, T[:3, :3], atol=1e-10)
    np.testing.assert_allclose(p.t, T[:3, 3], atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(tangents(3.0))
def test_log_exp_round_trip(xi):
    np.testing.assert_allclose(se3.log(se3.exp(xi)), xi, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(tangents(3.0))
def test_log_matches_matrix_logarithm(xi):
    L = np.real(scipy.linalg.logm(se3.exp(xi).matrix()))
    np.testing.assert_allclose(se3.log(se3.exp(xi)), np.concatenate([L[:3, 3], se3.vee(L[:3, :3])]), atol=1e-8)


def test_log_identity_and_translation():
    np.testing.assert_array_equal(se3.log(se3.Pose.identity()), np.zeros(6))
    np.testing.assert_allclose(se3.log(se3.Pose(np.eye(3), [1, 0, 0])), [1, 0, 0, 0, 0, 0])


def test_log_pure_rotation_about_z():
    xi = se3.log(se3.Pose(rot_z(0.5), np.zeros(3)))
    np.testing.assert_allclose(xi[3:], [0, 0, 0.5], atol=1e-15)
    np.testing.assert_allclose(xi[:3], 0.0, atol=1e-15)
    assert se3.exp(xi).allclose(se3.Pose(rot_z(0.5), np.zeros(3)), atol=1e-12)


@pytest.mark.parametrize("axis", [[0, 0, 1], [1, 0, 0], [1, 1, 0], [1, -2, 3]])
def test_log_at_pi_round_trips(axis):
    a = np.array(axis, dtype=float) / np.linalg.norm(axis)
    for angle in (np.pi, np.pi - 1e-7, np.pi - 1e-3):
        p = se3.Pose(se3.so3_exp(angle * a), [0.3, -0.2, 1.0])
        xi = se3.log(p)
        assert np.linalg.norm(xi[3:]) <= np.pi + 1e-12
        assert se3.exp(xi).allclose(p, atol=1e-9)


def test_small_angle_branch_is_continuous():
    for theta in (1e-9, 1e-8 * 0.999, 1e-8 * 1.001, 1e-7):
        xi = np.array([0.1, 0.2, 0.3, theta, 0.0, 0.0])
        np.testing.assert_allclose(se3.log(se3.exp(xi)), xi, atol=1e-15, rtol=1e-9)


def test_pose_rejects_non_rotation():
    with pytest.raises(InvalidArgumentError):
        se3.Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(InvalidArgumentError):
        se3.Pose(np.eye(3) * 1.001, np.zeros(3))


def test_transform_examples():
    np.testing.assert_array_equal(se3.transform(se3.Pose.identity(), [4, 5, 6]), [4, 5, 6])
    np.testing.assert_array_equal(se3.transform(se3.Pose(np.eye(3), [1, 2, 3]), [0, 0, 0]), [1, 2, 3])
    np.testing.assert_allclose(se3.transform(se3.Pose(rot_z(np.pi / 2), np.zeros(3)), [1, 0, 0]), [0, 1, 0], atol=1e-12)


def test_transform_inverse_round_trip():
    rng = np.random.default_rng(1)
    for _ in range(100):
        p = random_pose(rng, rot=2.0, trans=3.0)
        X = rng.normal(size=3) * 5
        np.testing.assert_allclose(se3.transform(p.inverse(), se3.transform(p, X)), X, atol=1e-10)


def test_project_examples():
    np.testing.assert_array_equal(se3.project(K500, [0, 0, 2]), [320, 240])
    np.testing.assert_array_equal(se3.project(K500, [1, 1, 2]), [570, 490])
    with pytest.raises(BehindCameraError):
        se3.project(K500, [0, 0, -1])
    with pytest.raises(BehindCameraError):
        se3.project(K500, [0, 0, 1e-7])


def test_back_project_examples():
    np.testing.assert_array_equal(se3.back_project(K500, (320, 240), 2.0), [0, 0, 2])
    np.testing.assert_array_equal(se3.back_project(K500, (570, 490), 2.0), [1, 1, 2])
    with pytest.raises(InvalidDepthError):
        se3.back_project(K500, (320, 240), 0.0)
    with pytest.raises(InvalidDepthError):
        se3.back_project(K500, (320, 240), -1.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 640), st.floats(0, 480), st.floats(0.01, 50))
def test_project_back_project_round_trip(u, v, d):
    uv = se3.project(K500, se3.back_project(K500, (u, v), d))
    np.testing.assert_allclose(uv, [u, v], atol=1e-10)


def test_jacobian_on_optical_axis():
    Jx, Jp = se3.jacobian_project_pose_point(se3.Pose.identity(), np.array([0.0, 0.0, 2.0]), K500)
    assert Jp[0, 0] == pytest.approx(500.0 / 2.0)
    assert Jp[0, 1] == 0.0


def test_pose_translation_columns_relate_to_point_jacobian():
    # left perturbation: d/d rho = d pi / d Xc, and d/dX = d pi / d Xc R
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = random_pose(rng, trans=0.2)
        X = p.inverse().act(np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2, 5)]))
        Jx, Jp = se3.jacobian_project_pose_point(p, X, K500)
        np.testing.assert_allclose(Jx[:, :3] @ p.R, Jp, rtol=1e-12, atol=1e-12)


def test_projection_jacobians_match_finite_differences():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        p = random_pose(rng, rot=2.0, trans=1.0)
        X = p.inverse().act(np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(1, 8)]))
        Jx, Jp = se3.jacobian_project_pose_point(p, X, K500)
        Jx_fd = pose_difference(lambda q: se3.project(K500, se3.transform(q, X)), p)
        Jp_fd = central_difference(lambda Y: se3.project(K500, se3.transform(p, Y)), X)
        worst = max(worst, rel_err(Jx, Jx_fd), rel_err(Jp, Jp_fd))
    assert worst < 1e-5


def test_jacobian_behind_camera_raises():
    with pytest.raises(BehindCameraError):
        se3.jacobian_project_pose_point(se3.Pose.identity(), np.array([0.0, 0.0, -1.0]), K500)


def test_look_at_points_optical_axis_at_target():
    p = se3.look_at(np.array([1.0, 2.0, -5.0]), np.array([0.5, 0.0, 0.0]))
    Xc = p.act(np.array([0.5, 0.0, 0.0]))
    np.testing.assert_allclose(Xc[:2], 0.0, atol=1e-12)
    assert Xc[2] > 0
    np.testing.assert_allclose(p.center, [1.0, 2.0, -5.0], atol=1e-12)


def test_intrinsics_validation():
    with pytest.raises(InvalidArgumentError):
        se3.CameraIntrinsics(0.0, 500.0, 320.0, 240.0)
    with pytest.raises(InvalidArgumentError):
        se3.CameraIntrinsics(500.0, 500.0, 320.0, 240.0, baseline=0.0)
