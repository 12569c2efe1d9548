"""Synthetic RGB-D scenes with ground truth: keyframes, points, 3D segments and noisy observations.

Random draws are split into independent streams (geometry, point noise,
line noise, guidance depth noise, initialization, outliers) so that changing
the guidance count or a noise scale does not disturb the other draws. This
keeps sweeps over ``guidance_count`` paired on identical scenes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import se3
from .errors import GenerationError, InvalidArgumentError
from .graph import FactorGraph
from .landmarks import (
    LineLandmark,
    LineObservation,
    NoiseModel,
    PointLandmark,
    PointObservation,
    normalize_line,
    sample_guidance_points,
)

MAX_ATTEMPTS = 1000
TRAJECTORIES = ("orbit", "corridor", "random-walk")


def default_intrinsics(width=640, height=480):
    return se3.CameraIntrinsics(517.0, 517.0, 318.6, 255.3, 0.08, width, height)


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    num_free: int = 4
    num_fixed: int = 2
    num_points: int = 60
    num_lines: int = 15
    guidance_count: int = 5
    workspace_low: tuple = (-2.0, -1.5, -2.0)
    workspace_high: tuple = (2.0, 1.5, 2.0)
    trajectory: str = "orbit"
    intrinsics: se3.CameraIntrinsics = field(default_factory=default_intrinsics)
    noise: NoiseModel = field(default_factory=NoiseModel)
    outlier_fraction: float = 0.0
    min_observations: int = 2
    init_trans_sigma: float = 0.01
    init_rot_sigma: float = 0.005
    line_depth_scale: float = 1.0
    noise_scale: float = 1.0
    depth_range: tuple = (0.3, 8.0)
    orbit_radius: float = 4.5
    keyframe_spacing: float = 0.1
    segment_length: tuple = (0.3, 2.0)
    axis_aligned_fraction: float = 0.7
    endpoint_trim: float = 0.1
    image_margin: float = 5.0
    min_segment_pixels: float = 20.0

    def validate(self):
        if self.num_free < 1 or self.num_fixed < 1:
            raise InvalidArgumentError("need at least one free and one fixed keyframe")
        if self.guidance_count < 2:
            raise InvalidArgumentError(f"guidance_count must be >= 2, got {self.guidance_count}")
        if self.num_points < 0 or self.num_lines < 0 or self.num_points + self.num_lines < 1:
            raise InvalidArgumentError("need at least one landmark")
        if not 0.0 <= self.outlier_fraction <= 0.5:
            raise InvalidArgumentError("outlier_fraction must lie in [0, 0.5]")
        if self.trajectory not in TRAJECTORIES:
            raise InvalidArgumentError(f"unknown trajectory {self.trajectory!r}")
        if self.min_observations < 1:
            raise InvalidArgumentError("min_observations must be >= 1")
        if self.intrinsics.width is None or self.intrinsics.height is None:
            raise InvalidArgumentError("intrinsics need an image size for visibility tests")

    def replace(self, **kw):
        return replace(self, **kw)


@dataclass
class GroundTruth:
    free_poses: dict
    fixed_poses: dict
    point_landmarks: dict
    line_landmarks: dict
    point_edges: list
    line_edges: list
    # per line: (A, B) world endpoints and the anchor keyframe used for sampling
    segments: dict = field(default_factory=dict)
    outlier_edges: dict = field(default_factory=lambda: {"point": [], "line": []})

    def graph(self, intrinsics, noise):
        """Noiseless problem evaluated at the true state."""
        return FactorGraph(
            intrinsics,
            noise,
            dict(self.free_poses),
            dict(self.fixed_poses),
            dict(self.point_landmarks),
            dict(self.line_landmarks),
            list(self.point_edges),
            list(self.line_edges),
        )

    def linearization_point(self, graph):
        """``graph`` with its state replaced by the true state (observations kept)."""
        return graph.with_states(self.free_poses, self.point_landmarks, self.line_landmarks)


def _streams(seed):
    ss = np.random.SeedSequence(seed)
    names = ("geometry", "point", "line", "depth", "init", "outlier")
    return {n: np.random.default_rng(s) for n, s in zip(names, ss.spawn(len(names)))}


def _trajectory(config, rng):
    n = config.num_free + config.num_fixed
    centers, targets = [], []
    if config.trajectory == "orbit":
        span = config.keyframe_spacing * (n - 1)
        start = -0.5 * span + rng.uniform(-0.05, 0.05)
        for k in range(n):
            a = start + config.keyframe_spacing * k
            r = config.orbit_radius
            centers.append([r * np.sin(a), rng.uniform(-0.25, 0.25), -r * np.cos(a)])
            targets.append(rng.uniform(-0.2, 0.2, 3))
    elif config.trajectory == "corridor":
        z0 = -config.orbit_radius
        step = config.keyframe_spacing * config.orbit_radius
        for k in range(n):
            x = (k - 0.5 * (n - 1)) * step
            centers.append([x, 0.15 * np.sin(1.3 * k) + rng.uniform(-0.05, 0.05), z0 + rng.uniform(-0.1, 0.1)])
            targets.append([x + rng.uniform(-0.3, 0.3), rng.uniform(-0.2, 0.2), 0.0])
    else:
        c = np.array([0.0, 0.0, -config.orbit_radius])
        step = config.keyframe_spacing * config.orbit_radius
        for _ in range(n):
            centers.append(c.copy())
            targets.append(rng.uniform(-0.3, 0.3, 3))
            c = c + rng.normal(0.0, step / np.sqrt(3), 3)
    return [se3.look_at(c, t) for c, t in zip(centers, targets)]


def _visible(K, pose, X, depth_range, margin):
    Xc = se3.transform(pose, X)
    if not depth_range[0] <= Xc[2] <= depth_range[1]:
        return None
    uv = np.array([K.fx * Xc[0] / Xc[2] + K.cx, K.fy * Xc[1] / Xc[2] + K.cy])
    return uv if K.in_image(uv, margin) else None


def _sample_direction(rng, axis_fraction):
    if rng.uniform() < axis_fraction:
        d = np.zeros(3)
        d[rng.integers(3)] = 1.0
        d = d + rng.normal(0.0, 0.05, 3)
    else:
        d = rng.normal(size=3)
    return d / np.linalg.norm(d)


def build_scene(config):
    """Ground-truth poses, landmarks and noiseless measurements (geometry stream only)."""
    config.validate()
    rng = _streams(config.seed)["geometry"]
    K = config.intrinsics
    m, d = config.num_free, config.num_fixed
    poses = _trajectory(config, rng)
    # oldest keyframes are fixed; the newest free keyframe gets id 0
    fixed = {m + k: poses[k] for k in range(d)}
    free = dict(sorted((m - 1 - k, poses[d + k]) for k in range(m)))
    all_poses = {**free, **fixed}
    kf_ids = sorted(all_poses)
    lo, hi = np.array(config.workspace_low), np.array(config.workspace_high)
    diag = {"point_rejections": 0, "line_rejections": 0}

    points, point_edges = {}, []
    for j in range(config.num_points):
        for attempt in range(MAX_ATTEMPTS):
            X = rng.uniform(lo, hi)
            obs = {}
            for i in kf_ids:
                uv = _visible(K, all_poses[i], X, config.depth_range, config.image_margin)
                if uv is not None:
                    obs[i] = uv
            if len(obs) >= config.min_observations:
                break
            diag["point_rejections"] += 1
        else:
            raise GenerationError(f"point {j}: visibility not achieved in {MAX_ATTEMPTS} attempts", diag)
        points[j] = PointLandmark(j, X)
        for i, uv in obs.items():
            depth = se3.transform(all_poses[i], X)[2]
            point_edges.append(PointObservation(i, j, uv[0], uv[1], depth))

    segments = {}
    for k in range(config.num_lines):
        j = config.num_points + k
        for attempt in range(MAX_ATTEMPTS):
            center = rng.uniform(0.8 * lo, 0.8 * hi)
            direction = _sample_direction(rng, config.axis_aligned_fraction)
            length = rng.uniform(*config.segment_length)
            A = center - 0.5 * length * direction
            B = center + 0.5 * length * direction
            views = []
            for i in kf_ids:
                ua = _visible(K, all_poses[i], A, config.depth_range, config.image_margin)
                ub = _visible(K, all_poses[i], B, config.depth_range, config.image_margin)
                if ua is not None and ub is not None and np.linalg.norm(ua - ub) >= config.min_segment_pixels:
                    views.append(i)
            if len(views) >= max(config.min_observations, 2):
                break
            diag["line_rejections"] += 1
        else:
            raise GenerationError(f"line {j}: visibility not achieved in {MAX_ATTEMPTS} attempts", diag)
        segments[j] = (A, B, views)

    shared = any(
        any(i in fixed for i in _views_of(point_edges, j)) and any(i in free for i in _views_of(point_edges, j))
        for j in points
    ) or any(any(i in fixed for i in v) and any(i in free for i in v) for _, _, v in segments.values())
    if not shared:
        raise GenerationError("fixed keyframes share no landmark with free keyframes", diag)
    seen = {e.keyframe_id for e in point_edges} | {i for _, _, v in segments.values() for i in v}
    missing = [i for i in free if i not in seen]
    if missing:
        raise GenerationError(f"free keyframes {missing} observe no landmark", diag)

    truth = GroundTruth(free, fixed, points, {}, point_edges, [], {})
    _attach_lines(truth, config, segments)
    return truth


def _views_of(edges, j):
    return [e.keyframe_id for e in edges if e.landmark_id == j]


def _attach_lines(truth, config, segments):
    """True guidance points (uniform in the anchor image) and noiseless line measurements."""
    K = config.intrinsics
    rng = _streams(config.seed)["line"]
    poses = {**truth.free_poses, **truth.fixed_poses}
    lines, edges = {}, []
    for j, (A, B, views) in segments.items():
        anchor = views[0]
        Ac, Bc = se3.transform(poses[anchor], A), se3.transform(poses[anchor], B)
        sig = np.arange(config.guidance_count) / (config.guidance_count - 1)
        tau = sig * Ac[2] / (sig * Ac[2] + (1.0 - sig) * Bc[2])
        lines[j] = LineLandmark(j, A[None, :] + tau[:, None] * (B - A)[None, :])
        truth.segments[j] = (A, B, anchor)
        for i in views:
            a = se3.project(K, se3.transform(poses[i], A))
            b = se3.project(K, se3.transform(poses[i], B))
            s0, s1 = rng.uniform(0.0, config.endpoint_trim, 2)
            p, q = a + s0 * (b - a), b - s1 * (b - a)
            edges.append(LineObservation(i, j, p, q, normalize_line(p, q)))
    truth.line_landmarks = lines
    truth.line_edges = sorted(edges, key=lambda e: (e.keyframe_id, e.landmark_id))
    truth.point_edges = sorted(truth.point_edges, key=lambda e: (e.keyframe_id, e.landmark_id))


def observe(truth, config, seed=None):
    """Noisy observations and initial estimates for a ground-truth scene.

    ``seed`` defaults to ``config.seed``; Monte Carlo studies pass a per-trial
    seed to redraw only the measurement and initialization noise.
    """
    seed = config.seed if seed is None else seed
    streams = _streams(seed)
    K = config.intrinsics
    # measurements are drawn with the scaled model; the graph keeps the nominal one for weighting
    noise = config.noise.scaled(config.noise_scale, config.noise_scale, config.noise_scale)
    poses = {**truth.free_poses, **truth.fixed_poses}

    rng = streams["point"]
    point_edges = []
    for e in truth.point_edges:
        z = rng.normal(size=3)
        d = e.d + noise.sigma_depth(e.d) * z[2]
        if d <= 0:
            d = e.d
        point_edges.append(PointObservation(e.keyframe_id, e.landmark_id, e.u + noise.sigma_p * z[0], e.v + noise.sigma_p * z[1], d))

    rng = streams["line"]
    _ = rng.uniform(size=2 * len(truth.line_edges))  # trims were drawn from the truth seed
    line_edges = []
    for e in truth.line_edges:
        z = rng.normal(size=4)
        p = e.p_start + noise.sigma_line * z[:2]
        q = e.p_end + noise.sigma_line * z[2:]
        line_edges.append(LineObservation(e.keyframe_id, e.landmark_id, p, q, normalize_line(p, q)))

    rng = streams["init"]
    free_init = {}
    for i, T in truth.free_poses.items():
        xi = np.concatenate([rng.normal(0.0, config.init_trans_sigma, 3), rng.normal(0.0, config.init_rot_sigma, 3)])
        free_init[i] = se3.exp(xi) @ T
    init_poses = {**free_init, **truth.fixed_poses}

    points_init = {}
    first_obs = {}
    for e in point_edges:
        first_obs.setdefault(e.landmark_id, e)
    for j, e in first_obs.items():
        Xc = se3.back_project(K, (e.u, e.v), e.d)
        points_init[j] = PointLandmark(j, init_poses[e.keyframe_id].inverse().act(Xc))

    rng = streams["depth"]
    lines_init = {}
    obs_by_key = {(e.keyframe_id, e.landmark_id): e for e in line_edges}
    for j, line in truth.line_landmarks.items():
        anchor = truth.segments[j][2]
        obs = obs_by_key[(anchor, j)]
        uv = sample_guidance_points(obs.p_start, obs.p_end, line.n)
        depths = np.array([se3.transform(poses[anchor], P)[2] for P in line.guidance_points])
        z = rng.normal(size=line.n)
        noisy = depths + config.line_depth_scale * noise.sigma_depth(depths) * z
        noisy = np.where(noisy > config.depth_range[0] * 0.5, noisy, depths)
        inv = init_poses[anchor].inverse()
        lines_init[j] = LineLandmark(j, [inv.act(se3.back_project(K, uv[s], noisy[s])) for s in range(line.n)])

    graph = FactorGraph(
        K, config.noise, free_init, dict(truth.fixed_poses), points_init, lines_init, point_edges, line_edges
    )
    if config.outlier_fraction > 0:
        graph, ids = _inject(graph, config.outlier_fraction, streams["outlier"])
        truth.outlier_edges = ids
    return graph


def generate(config):
    """Noisy problem with initial estimates, plus the ground truth it was drawn from."""
    truth = build_scene(config)
    graph = observe(truth, config)
    return graph, truth


def _random_line(rng, K):
    while True:
        p = rng.uniform([0.0, 0.0], [K.width - 1, K.height - 1])
        q = rng.uniform([0.0, 0.0], [K.width - 1, K.height - 1])
        if np.linalg.norm(p - q) > 1.0:
            return p, q


def _inject(graph, fraction, rng):
    K = graph.intrinsics
    g = graph.copy()
    n_p = int(round(fraction * len(g.point_edges)))
    n_l = int(round(fraction * len(g.line_edges)))
    pick_p = np.sort(rng.choice(len(g.point_edges), n_p, replace=False)) if n_p else np.zeros(0, int)
    pick_l = np.sort(rng.choice(len(g.line_edges), n_l, replace=False)) if n_l else np.zeros(0, int)
    for i in pick_p:
        e = g.point_edges[i]
        u, v = rng.uniform([0.0, 0.0], [K.width - 1, K.height - 1])
        g.point_edges[i] = PointObservation(e.keyframe_id, e.landmark_id, u, v, e.d)
    for i in pick_l:
        e = g.line_edges[i]
        p, q = _random_line(rng, K)
        g.line_edges[i] = LineObservation(e.keyframe_id, e.landmark_id, p, q, normalize_line(p, q))
    return g, {"point": [int(i) for i in pick_p], "line": [int(i) for i in pick_l]}


def inject_outliers(graph, fraction, seed, truth=None):
    """Replace a fraction of point edges' pixels and line edges' coefficients by random values.

    The chosen edge ids are stored on ``truth.outlier_edges`` when a
    GroundTruth is given. Edge ids are positions in the sorted edge lists.
    """
    if not 0.0 <= fraction <= 0.5:
        raise InvalidArgumentError("outlier fraction must lie in [0, 0.5]")
    if fraction == 0:
        if truth is not None:
            truth.outlier_edges = {"point": [], "line": []}
        return graph
    out, ids = _inject(graph, fraction, np.random.default_rng(seed))
    if truth is not None:
        truth.outlier_edges = ids
    return out
