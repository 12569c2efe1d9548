"""Landmarks, RGB-D/line observations, the measurement noise model and residuals."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import se3
from .errors import (
    BehindCameraError,
    DegenerateLineError,
    InvalidArgumentError,
    InvalidDepthError,
    InvalidNoiseModelError,
)

DEFAULT_GUIDANCE_COUNT = 5
DEGENERATE_LINE_EPS = 1e-9

# sigma_d(d) = 0.0012 + 0.0019 (d - 0.4)^2, expanded into k0 + k1 d + k2 d^2
_DEFAULT_DEPTH_COEFFS = (0.0012 + 0.0019 * 0.16, -2 * 0.4 * 0.0019, 0.0019)


def pyramid_sigma(level, base=1.0, scale=1.2):
    """Pixel standard deviation for a feature extracted at pyramid ``level``."""
    return base * scale**level


@dataclass(frozen=True)
class NoiseModel:
    sigma_p: float = 1.0
    depth_coeffs: tuple = _DEFAULT_DEPTH_COEFFS
    sigma_line: float = 1.0

    def __post_init__(self):
        if self.sigma_p < 0 or self.sigma_line < 0:
            raise InvalidNoiseModelError("standard deviations must be nonnegative")
        object.__setattr__(self, "depth_coeffs", tuple(float(c) for c in self.depth_coeffs))

    def sigma_depth(self, d):
        k0, k1, k2 = self.depth_coeffs
        return k0 + k1 * d + k2 * d * d

    def validate(self, depth_range=(0.3, 8.0), samples=64):
        """Raise if the model gives a singular observation covariance in range."""
        if self.sigma_p <= 0:
            raise InvalidNoiseModelError("sigma_p must be positive for a weighted problem")
        if self.sigma_line <= 0:
            raise InvalidNoiseModelError("sigma_line must be positive for a weighted problem")
        ds = np.linspace(depth_range[0], depth_range[1], samples)
        sd = self.sigma_depth(ds)
        if np.any(sd <= 0):
            bad = float(ds[np.argmax(sd <= 0)])
            raise InvalidNoiseModelError(f"sigma_d({bad:.3g}) <= 0: degenerate depth model")

    def scaled(self, pixel=1.0, depth=1.0, line=1.0):
        return NoiseModel(
            sigma_p=self.sigma_p * pixel,
            depth_coeffs=tuple(c * depth for c in self.depth_coeffs),
            sigma_line=self.sigma_line * line,
        )


@dataclass(frozen=True, eq=False)
class PointLandmark:
    id: int
    position: np.ndarray

    def __post_init__(self):
        pos = np.array(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(pos)):
            raise InvalidArgumentError(f"landmark {self.id} has non-finite position")
        object.__setattr__(self, "position", pos)


@dataclass(frozen=True, eq=False)
class LineLandmark:
    """A map line carried as ``N`` guidance points.

    Collinearity is only checked at construction (``check_collinear``); during
    optimization the guidance points move independently.
    """

    id: int
    guidance_points: np.ndarray
    check_collinear: bool = field(default=False, repr=False)
    collinearity_tol: float = field(default=1e-9, repr=False)

    def __post_init__(self):
        pts = np.array(self.guidance_points, dtype=float).reshape(-1, 3)
        if pts.shape[0] < 2:
            raise InvalidArgumentError("a line landmark needs at least two guidance points")
        if not np.all(np.isfinite(pts)):
            raise InvalidArgumentError(f"line {self.id} has non-finite guidance points")
        if self.check_collinear:
            a, b = pts[0], pts[-1]
            u = b - a
            n = np.linalg.norm(u)
            if n == 0:
                raise DegenerateLineError(f"line {self.id} has coincident endpoints")
            u = u / n
            off = (pts - a) - np.outer((pts - a) @ u, u)
            if np.max(np.linalg.norm(off, axis=1)) > self.collinearity_tol:
                raise InvalidArgumentError(f"line {self.id} guidance points are not collinear")
        object.__setattr__(self, "guidance_points", pts)

    @property
    def endpoints(self):
        return self.guidance_points[0], self.guidance_points[-1]

    @property
    def n(self):
        return self.guidance_points.shape[0]


@dataclass(frozen=True)
class PointObservation:
    keyframe_id: int
    landmark_id: int
    u: float
    v: float
    d: float

    def __post_init__(self):
        if not self.d > 0:
            raise InvalidDepthError(f"observation depth {self.d} must be positive")


@dataclass(frozen=True, eq=False)
class LineObservation:
    keyframe_id: int
    landmark_id: int
    p_start: np.ndarray
    p_end: np.ndarray
    coeffs: np.ndarray = None

    def __post_init__(self):
        p = np.array(self.p_start, dtype=float).reshape(2)
        q = np.array(self.p_end, dtype=float).reshape(2)
        object.__setattr__(self, "p_start", p)
        object.__setattr__(self, "p_end", q)
        if self.coeffs is None:
            object.__setattr__(self, "coeffs", normalize_line(p, q))
        else:
            l = np.array(self.coeffs, dtype=float).reshape(3)
            if abs(np.hypot(l[0], l[1]) - 1.0) > 1e-12:
                raise InvalidArgumentError("line coefficients must satisfy a^2 + b^2 = 1")
            object.__setattr__(self, "coeffs", l)

    @classmethod
    def from_coefficients(cls, keyframe_id, landmark_id, coeffs, p_start=None, p_end=None):
        """Observation with explicit coefficients; endpoints default to the foot of the origin."""
        l = normalize_coefficients(coeffs)
        if p_start is None or p_end is None:
            foot = -l[2] * l[:2]
            direction = np.array([-l[1], l[0]])
            p_start, p_end = foot - direction, foot + direction
        return cls(keyframe_id, landmark_id, p_start, p_end, l)


def normalize_coefficients(l0):
    """Scale ``(a, b, c)`` so that ``a^2 + b^2 = 1`` and the first nonzero of (a, b) is positive."""
    l0 = np.asarray(l0, dtype=float).reshape(3)
    n = float(np.hypot(l0[0], l0[1]))
    if not n > 0:
        raise DegenerateLineError("line coefficients have a = b = 0")
    l = l0 / n
    lead = l[0] if l[0] != 0.0 else l[1]
    return -l if lead < 0 else l


def normalize_line(p_start, p_end, eps=DEGENERATE_LINE_EPS):
    """Normalized coefficients of the image line through two endpoints."""
    p = np.asarray(p_start, dtype=float)
    q = np.asarray(p_end, dtype=float)
    if np.linalg.norm(p - q) <= eps:
        raise DegenerateLineError("line endpoints coincide")
    l0 = np.cross(np.append(p, 1.0), np.append(q, 1.0))
    return normalize_coefficients(l0)


def point_line_signed_distance(l, P):
    return float(np.dot(l, P))


def endpoint_line_error(l, P, Q):
    return point_line_signed_distance(l, P) ** 2 + point_line_signed_distance(l, Q) ** 2


def sample_guidance_points(p_start, p_end, n=DEFAULT_GUIDANCE_COUNT):
    """``n`` evenly spaced image points from ``p_start`` to ``p_end`` inclusive."""
    if n < 2:
        raise InvalidArgumentError(f"need at least 2 guidance points, got {n}")
    p = np.asarray(p_start, dtype=float)
    q = np.asarray(p_end, dtype=float)
    if np.linalg.norm(p - q) <= DEGENERATE_LINE_EPS:
        raise DegenerateLineError("line endpoints coincide")
    s = np.arange(n) / (n - 1)
    return p[None, :] + s[:, None] * (q - p)[None, :]


def rgbd_point_parameterization(K, obs):
    """Observation vector ``[u, v, u - fx b / d]``."""
    if not obs.d > 0:
        raise InvalidDepthError(f"depth {obs.d} must be positive")
    return np.array([obs.u, obs.v, obs.u - K.fx * K.baseline / obs.d])


def rgbd_jacobian(K, d):
    return np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, K.fx * K.baseline / (d * d)]])


def point_observation_covariance(K, obs, noise):
    """Covariance of the parameterized observation, ``J diag(sp^2, sp^2, sd^2) J^T``."""
    if not obs.d > 0:
        raise InvalidDepthError(f"depth {obs.d} must be positive")
    sd = noise.sigma_depth(obs.d)
    if not sd > 0:
        raise InvalidNoiseModelError(f"sigma_d({obs.d}) = {sd} is not positive")
    J = rgbd_jacobian(K, obs.d)
    cov = J @ np.diag([noise.sigma_p**2, noise.sigma_p**2, sd**2]) @ J.T
    return 0.5 * (cov + cov.T)


def _camera_point(pose, X, z_min):
    Xc = se3.transform(pose, X)
    if not Xc[2] > z_min:
        raise BehindCameraError(f"point at depth {Xc[2]:.3g} is behind the camera")
    return Xc


def predicted_rgbd(K, Xc):
    """``[pi(Xc); fx (X - b) / Z + cx]`` for a camera-frame point."""
    X, Y, Z = Xc
    u = K.fx * X / Z + K.cx
    return np.array([u, K.fy * Y / Z + K.cy, u - K.fx * K.baseline / Z])


def predicted_rgbd_jacobian(K, Xc):
    X, Y, Z = Xc
    iz = 1.0 / Z
    return np.array(
        [
            [K.fx * iz, 0.0, -K.fx * X * iz * iz],
            [0.0, K.fy * iz, -K.fy * Y * iz * iz],
            [K.fx * iz, 0.0, -K.fx * (X - K.baseline) * iz * iz],
        ]
    )


def point_residual(pose, K, landmark, obs, z_min=se3.Z_MIN):
    Xc = _camera_point(pose, landmark.position, z_min)
    return predicted_rgbd(K, Xc) - rgbd_point_parameterization(K, obs)


def point_residual_jacobians(pose, K, landmark, obs, z_min=se3.Z_MIN):
    """(3x6 w.r.t. a left pose perturbation, 3x3 w.r.t. the landmark)."""
    Xc = _camera_point(pose, landmark.position, z_min)
    Jr = predicted_rgbd_jacobian(K, Xc)
    return Jr @ se3.point_pose_jacobian(Xc), Jr @ pose.R


def guidance_residual(pose, K, line, obs, z_min=se3.Z_MIN):
    """Signed distances of the projected guidance points to the observed line."""
    l = obs.coeffs
    out = np.empty(line.n)
    for s, P in enumerate(line.guidance_points):
        uv = se3.project(K, se3.transform(pose, P), z_min)
        out[s] = l[0] * uv[0] + l[1] * uv[1] + l[2]
    return out


def guidance_residual_jacobians(pose, K, line, obs, z_min=se3.Z_MIN):
    """(N x 6 pose Jacobian, N x 3 landmark Jacobian).

    Row ``s`` of the landmark Jacobian is taken w.r.t. guidance point ``s``
    only; the residual does not depend on the other points.
    """
    l2 = obs.coeffs[:2]
    Jx = np.empty((line.n, 6))
    Jl = np.empty((line.n, 3))
    for s, P in enumerate(line.guidance_points):
        Xc = _camera_point(pose, P, z_min)
        row = l2 @ se3.projection_jacobian(K, Xc)
        Jx[s] = row @ se3.point_pose_jacobian(Xc)
        Jl[s] = row @ pose.R
    return Jx, Jl
