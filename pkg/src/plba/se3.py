"""SE(3) poses, tangent-space maps, and the pinhole camera.

Tangent vectors are ordered ``(rho, phi)``: three translational components
followed by three rotational components. Poses map world points into the
camera frame, ``X_c = R X + t``, and perturbations are applied on the left,
``T <- exp(delta) T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, InvalidArgumentError, InvalidDepthError

SMALL_ANGLE = 1e-8
NEAR_PI = 1e-6
Z_MIN = 1e-6


def hat(w):
    """Skew-symmetric matrix with ``hat(w) @ v == cross(w, v)``."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def vee(W):
    return np.array([W[2, 1], W[0, 2], W[1, 0]])


def _so3_coeffs(theta):
    # (sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3)
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s = np.sin(theta)
    half = np.sin(0.5 * theta)
    return s / theta, 2.0 * half * half / (theta * theta), (theta - s) / theta**3


def so3_exp(phi):
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    a, b, _ = _so3_coeffs(theta)
    K = hat(phi)
    return np.eye(3) + a * K + b * (K @ K)


def so3_left_jacobian(phi):
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    _, b, c = _so3_coeffs(theta)
    K = hat(phi)
    return np.eye(3) + b * K + c * (K @ K)


def so3_left_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = hat(phi)
    if theta < SMALL_ANGLE:
        coef = 1.0 / 12.0
    else:
        half = 0.5 * theta
        # 1/t^2 * (1 - (t/2) cot(t/2)), stable for t up to pi
        coef = (1.0 - half * np.cos(half) / np.sin(half)) / (theta * theta)
    return np.eye(3) - 0.5 * K + coef * (K @ K)


def so3_log(R):
    """Rotation vector of ``R`` with magnitude in ``[0, pi]``.

    At exactly pi the axis sign is ambiguous; the branch below recovers the
    axis from the symmetric part of ``R`` and picks the sign that agrees with
    the (tiny) antisymmetric part when it is nonzero, otherwise the first
    nonzero axis component is made positive.
    """
    R = np.asarray(R, dtype=float)
    w = 0.5 * vee(R - R.T)
    s = float(np.linalg.norm(w))
    c = 0.5 * (np.trace(R) - 1.0)
    theta = float(np.arctan2(s, c))
    if theta < SMALL_ANGLE:
        # R ~ I + hat(phi)
        return w * (1.0 + theta * theta / 6.0)
    if np.pi - theta > NEAR_PI:
        return w * (theta / s)
    S = 0.5 * (R + R.T)
    aa = (S - c * np.eye(3)) / (1.0 - c)
    i = int(np.argmax(np.diag(aa)))
    axis = aa[:, i] / np.sqrt(aa[i, i])
    axis /= np.linalg.norm(axis)
    d = float(axis @ w)
    if d < 0.0 or (d == 0.0 and axis[np.flatnonzero(axis)[0]] < 0.0):
        axis = -axis
    return theta * axis


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``X -> R X + t`` (world to camera)."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidArgumentError("pose has non-finite entries")
        if np.linalg.norm(R.T @ R - np.eye(3)) > 1e-10 or abs(np.linalg.det(R) - 1.0) > 1e-10:
            raise InvalidArgumentError("rotation is not orthonormal with det 1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self):
        return Pose(self.R.T, -self.R.T @ self.t)

    def __matmul__(self, other):
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def act(self, X):
        return transform(self, X)

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def allclose(self, other, atol=1e-9):
        return np.allclose(self.R, other.R, atol=atol) and np.allclose(self.t, other.t, atol=atol)

    def __repr__(self):
        return f"Pose(log={np.array2string(log(self), precision=6)})"


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float = 0.08
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0 and self.baseline > 0):
            raise InvalidArgumentError("fx, fy and baseline must be positive")

    def in_image(self, uv, margin=0.0):
        if self.width is None or self.height is None:
            return True
        u, v = uv
        return margin <= u <= self.width - 1 - margin and margin <= v <= self.height - 1 - margin


def exp(xi):
    """Map a tangent ``(rho, phi)`` to a Pose."""
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if xi.shape != (6,) or not np.all(np.isfinite(xi)):
        raise InvalidArgumentError("tangent must be a finite 6-vector")
    rho, phi = xi[:3], xi[3:]
    return Pose(so3_exp(phi), so3_left_jacobian(phi) @ rho)


def log(p):
    phi = so3_log(p.R)
    rho = so3_left_jacobian_inv(phi) @ p.t
    return np.concatenate([rho, phi])


def transform(p, X):
    return p.R @ np.asarray(X, dtype=float) + p.t


def project(K, Xc, z_min=Z_MIN):
    X, Y, Z = np.asarray(Xc, dtype=float)
    if not Z > z_min:
        raise BehindCameraError(f"depth {Z} is not beyond z_min={z_min}")
    return np.array([K.fx * X / Z + K.cx, K.fy * Y / Z + K.cy])


def back_project(K, uv, d, z_min=Z_MIN):
    if not d > z_min:
        raise InvalidDepthError(f"depth {d} must exceed {z_min}")
    u, v = uv
    return np.array([(u - K.cx) * d / K.fx, (v - K.cy) * d / K.fy, d])


def projection_jacobian(K, Xc):
    """d pi / d X_c as a 2x3 matrix."""
    X, Y, Z = Xc
    iz = 1.0 / Z
    return np.array(
        [
            [K.fx * iz, 0.0, -K.fx * X * iz * iz],
            [0.0, K.fy * iz, -K.fy * Y * iz * iz],
        ]
    )


def point_pose_jacobian(Xc):
    """d (exp(delta) T X) / d delta at delta = 0, i.e. ``[I, -hat(Xc)]``."""
    return np.hstack([np.eye(3), -hat(Xc)])


def jacobian_project_pose_point(p, X, K, z_min=Z_MIN):
    """Jacobians of ``pi(T X)`` w.r.t. a left pose perturbation and ``X``."""
    Xc = transform(p, X)
    if not Xc[2] > z_min:
        raise BehindCameraError(f"depth {Xc[2]} is not beyond z_min={z_min}")
    Jp = projection_jacobian(K, Xc)
    return Jp @ point_pose_jacobian(Xc), Jp @ p.R


def look_at(center, target, up=(0.0, -1.0, 0.0)):
    """World-to-camera pose with the optical axis pointing at ``target``.

    Camera axes follow the usual vision convention: x right, y down, z forward.
    """
    center = np.asarray(center, dtype=float)
    z = np.asarray(target, dtype=float) - center
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=float), z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross([1.0, 0.0, 0.0], z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R_wc = np.column_stack([x, y, z])
    return Pose(R_wc.T, -R_wc.T @ center)


# Batched helpers used by the solver. Shapes: R (n,3,3), t (n,3), phi (n,3).


def batch_hat(w):
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out
