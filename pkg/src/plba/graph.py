"""Local bundle-adjustment problem container."""

from __future__ import annotations

import copy
import enum
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import GraphValidationError, InvalidArgumentError
from .landmarks import LineLandmark, NoiseModel, PointLandmark
from .se3 import CameraIntrinsics, Pose


class Selector(str, enum.Enum):
    POINTS = "points"
    LINES = "lines"
    BOTH = "both"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {"points-only": "points", "lines-only": "lines", "h": "points", "f": "lines", "g": "both"}
        try:
            return cls(aliases.get(str(value), str(value)))
        except ValueError:
            raise InvalidArgumentError(f"unknown selector {value!r}") from None

    @property
    def uses_points(self):
        return self in (Selector.POINTS, Selector.BOTH)

    @property
    def uses_lines(self):
        return self in (Selector.LINES, Selector.BOTH)


def _edge_key(e):
    return (e.keyframe_id, e.landmark_id)


@dataclass
class FactorGraph:
    """Free/fixed keyframe poses, point and line landmarks, and their observation edges.

    Edge lists are kept sorted by ``(keyframe_id, landmark_id)``; an edge's
    position in its list is its id.
    """

    intrinsics: CameraIntrinsics
    noise: NoiseModel
    free_poses: dict = field(default_factory=dict)
    fixed_poses: dict = field(default_factory=dict)
    point_landmarks: dict = field(default_factory=dict)
    line_landmarks: dict = field(default_factory=dict)
    point_edges: list = field(default_factory=list)
    line_edges: list = field(default_factory=list)
    gauge_declared: bool = False

    def __post_init__(self):
        self.free_poses = dict(sorted(self.free_poses.items()))
        self.fixed_poses = dict(sorted(self.fixed_poses.items()))
        self.point_landmarks = dict(sorted(self.point_landmarks.items()))
        self.line_landmarks = dict(sorted(self.line_landmarks.items()))
        self.point_edges = sorted(self.point_edges, key=_edge_key)
        self.line_edges = sorted(self.line_edges, key=_edge_key)

    def pose(self, keyframe_id):
        if keyframe_id in self.free_poses:
            return self.free_poses[keyframe_id]
        return self.fixed_poses[keyframe_id]

    @property
    def keyframe_ids(self):
        return sorted([*self.free_poses, *self.fixed_poses])

    def copy(self):
        return copy.copy(self)._replace_containers()

    def _replace_containers(self):
        self.free_poses = dict(self.free_poses)
        self.fixed_poses = dict(self.fixed_poses)
        self.point_landmarks = dict(self.point_landmarks)
        self.line_landmarks = dict(self.line_landmarks)
        self.point_edges = list(self.point_edges)
        self.line_edges = list(self.line_edges)
        return self

    def with_states(self, free_poses=None, point_landmarks=None, line_landmarks=None):
        """Copy with some state blocks replaced (e.g. a linearization point)."""
        g = self.copy()
        if free_poses is not None:
            g.free_poses = {k: free_poses[k] for k in self.free_poses}
        if point_landmarks is not None:
            g.point_landmarks = {k: point_landmarks[k] for k in self.point_landmarks}
        if line_landmarks is not None:
            g.line_landmarks = {k: line_landmarks[k] for k in self.line_landmarks}
        return g

    def without_lines(self):
        g = self.copy()
        g.line_landmarks = {}
        g.line_edges = []
        return g

    def validate(self, selector=Selector.BOTH):
        """Check the structural invariants; raise GraphValidationError listing violations."""
        selector = Selector.parse(selector)
        problems = []
        overlap = set(self.free_poses) & set(self.fixed_poses)
        if overlap:
            problems.append(f"keyframes both free and fixed: {sorted(overlap)}")
        shared = set(self.point_landmarks) & set(self.line_landmarks)
        if shared:
            problems.append(f"landmark ids used by both points and lines: {sorted(shared)}")
        kfs = set(self.free_poses) | set(self.fixed_poses)
        used_kf = set()
        views = defaultdict(set)
        for e in self.point_edges if selector.uses_points else []:
            if e.keyframe_id not in kfs:
                problems.append(f"point edge references unknown keyframe {e.keyframe_id}")
            if e.landmark_id not in self.point_landmarks:
                problems.append(f"point edge references unknown landmark {e.landmark_id}")
            used_kf.add(e.keyframe_id)
            views[("point", e.landmark_id)].add(e.keyframe_id)
        for e in self.line_edges if selector.uses_lines else []:
            if e.keyframe_id not in kfs:
                problems.append(f"line edge references unknown keyframe {e.keyframe_id}")
            line = self.line_landmarks.get(e.landmark_id)
            if line is None:
                problems.append(f"line edge references unknown landmark {e.landmark_id}")
            used_kf.add(e.keyframe_id)
            views[("line", e.landmark_id)].add(e.keyframe_id)
        if selector.uses_points:
            for j in self.point_landmarks:
                if not views[("point", j)]:
                    problems.append(f"point landmark {j} has no observations")
        if selector.uses_lines:
            for j in self.line_landmarks:
                if len(views[("line", j)]) < 2:
                    problems.append(f"line landmark {j} is observed by fewer than 2 keyframes")
        for i in self.free_poses:
            if i not in used_kf:
                problems.append(f"free keyframe {i} has no edges")
        if not self.fixed_poses and not self.gauge_declared:
            problems.append("no fixed keyframe and no declared gauge")
        if problems:
            raise GraphValidationError("; ".join(problems))

    def unobserved_free_poses(self, selector=Selector.BOTH):
        selector = Selector.parse(selector)
        used = set()
        if selector.uses_points:
            used.update(e.keyframe_id for e in self.point_edges)
        if selector.uses_lines:
            used.update(e.keyframe_id for e in self.line_edges)
        return [i for i in self.free_poses if i not in used]

    def num_state_variables(self, selector=Selector.BOTH):
        selector = Selector.parse(selector)
        n = 6 * len(self.free_poses)
        if selector.uses_points:
            n += 3 * len(self.point_landmarks)
        if selector.uses_lines:
            n += 3 * sum(l.n for l in self.line_landmarks.values())
        return n


def relabel_landmarks(graph, point_map, line_map):
    """Copy of ``graph`` with landmark ids renamed through the given maps."""
    from .landmarks import LineObservation, PointObservation

    g = graph.copy()
    g.point_landmarks = {point_map[k]: PointLandmark(point_map[k], v.position) for k, v in graph.point_landmarks.items()}
    g.line_landmarks = {line_map[k]: LineLandmark(line_map[k], v.guidance_points) for k, v in graph.line_landmarks.items()}
    g.point_edges = [
        PointObservation(e.keyframe_id, point_map[e.landmark_id], e.u, e.v, e.d) for e in graph.point_edges
    ]
    g.line_edges = [
        LineObservation(e.keyframe_id, line_map[e.landmark_id], e.p_start, e.p_end, e.coeffs)
        for e in graph.line_edges
    ]
    g.__post_init__()
    return g


def pose_array(poses):
    """Stack a mapping of Poses into (R, t) arrays in key order."""
    if not poses:
        return np.zeros((0, 3, 3)), np.zeros((0, 3))
    return np.stack([p.R for p in poses.values()]), np.stack([p.t for p in poses.values()])


def poses_from_arrays(ids, R, t):
    return {i: Pose(R[k], t[k]) for k, i in enumerate(ids)}
