import logging

import numpy as np
import pytest

from plba import se3
from plba.graph import FactorGraph
from plba.landmarks import (
    LineLandmark,
    LineObservation,
    NoiseModel,
    PointLandmark,
    PointObservation,
    normalize_line,
)
from plba.synthetic import SceneConfig


@pytest.fixture(autouse=True)
def _quiet_regularization_warnings(caplog):
    caplog.set_level(logging.ERROR, logger="plba.ba")


def central_difference(f, x, h=1e-6):
    """Jacobian of ``f`` at ``x`` by central differences."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(f(x))
    J = np.zeros((f0.size, x.size))
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        J[:, k] = (np.atleast_1d(f(x + e)) - np.atleast_1d(f(x - e))) / (2 * h)
    return J


def pose_difference(f, pose, h=1e-6):
    """Jacobian of ``f(pose)`` w.r.t. a left tangent perturbation ``exp(d) pose``."""
    return central_difference(lambda d: f(se3.exp(d) @ pose), np.zeros(6), h)


def rel_err(A, B):
    return np.linalg.norm(A - B) / max(np.linalg.norm(B), 1e-300)


def random_pose(rng, rot=1.0, trans=1.0):
    return se3.exp(np.concatenate([rng.normal(0, trans, 3), rng.normal(0, rot / np.sqrt(3), 3)]))


def small_config(seed, **kw):
    base = dict(seed=seed, num_free=2, num_fixed=1, num_points=6, num_lines=2, guidance_count=3)
    base.update(kw)
    return SceneConfig(**base)


def random_instance_config(rng, seed):
    """Scene sizes drawn from the ranges used by the theorem sweeps."""
    return SceneConfig(
        seed=seed,
        num_free=int(rng.integers(1, 5)),
        num_fixed=int(rng.integers(1, 3)),
        num_points=int(rng.integers(5, 61)),
        num_lines=int(rng.integers(2, 16)),
        guidance_count=int(rng.integers(2, 8)),
    )


FIG3_POINT_EDGES = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (1, 4), (2, 4), (3, 4)]
FIG3_LINE_EDGES = [(0, 11), (1, 11), (1, 12), (2, 12)]


def fig3_graph(n_guidance=2, noise=None):
    """Two free keyframes (0, 1), two fixed (2, 3), four points and two lines in the
    small local-BA topology: the point and line edge sets are disjoint.
    """
    K = se3.CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 0.08, 640, 480)
    centers = {0: [-0.6, 0.0, -4.0], 1: [-0.2, 0.05, -4.0], 2: [0.2, -0.05, -4.0], 3: [0.6, 0.0, -4.0]}
    poses = {i: se3.look_at(np.array(c), np.zeros(3)) for i, c in centers.items()}
    pts = {1: [-0.8, 0.3, 0.2], 2: [-0.3, -0.4, -0.1], 3: [0.2, 0.5, 0.3], 4: [0.7, -0.2, -0.2]}
    points = {j: PointLandmark(j, p) for j, p in pts.items()}
    segs = {11: ([-0.9, -0.6, 0.4], [-0.1, 0.7, 0.1]), 12: ([0.1, -0.7, -0.3], [0.9, 0.4, 0.2])}
    lines = {}
    for j, (a, b) in segs.items():
        a, b = np.array(a), np.array(b)
        s = np.linspace(0.0, 1.0, n_guidance)
        lines[j] = LineLandmark(j, a[None, :] + s[:, None] * (b - a)[None, :], check_collinear=True)
    pe = []
    for i, j in FIG3_POINT_EDGES:
        Xc = se3.transform(poses[i], points[j].position)
        uv = se3.project(K, Xc)
        pe.append(PointObservation(i, j, uv[0], uv[1], Xc[2]))
    le = []
    for i, j in FIG3_LINE_EDGES:
        a, b = segs[j]
        p = se3.project(K, se3.transform(poses[i], np.array(a)))
        q = se3.project(K, se3.transform(poses[i], np.array(b)))
        le.append(LineObservation(i, j, p, q, normalize_line(p, q)))
    return FactorGraph(
        K,
        noise or NoiseModel(),
        {0: poses[0], 1: poses[1]},
        {2: poses[2], 3: poses[3]},
        points,
        lines,
        pe,
        le,
    )


@pytest.fixture
def fig3():
    return fig3_graph()
