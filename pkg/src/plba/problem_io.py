"""Problem files: schema-versioned JSON with every float written at 17 significant digits.

The writer is deterministic: key order is fixed by construction and floats
are formatted with ``%.17g``, so equal problems serialize to equal bytes and
every float reads back to the identical double.
"""

from __future__ import annotations

import json
import math

import numpy as np

from . import SCHEMA_VERSION
from .ba import RobustLoss, SolverOptions
from .errors import PLBAError, ProblemFormatError
from .graph import FactorGraph
from .landmarks import LineLandmark, LineObservation, NoiseModel, PointLandmark, PointObservation
from .se3 import CameraIntrinsics, Pose

SECTIONS = ("intrinsics", "noise", "poses", "landmarks", "observations", "solver")


# ------------------------------------------------------------------ writer


def _scalar(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if x is None:
        return "null"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if not math.isfinite(x):
            raise ProblemFormatError(f"cannot serialize non-finite float {x}")
        s = "%.17g" % x
        # keep a float marker so values such as -0.0 read back as floats
        return s if any(c in s for c in ".e") else s + ".0"
    if isinstance(x, str):
        return json.dumps(x)
    raise ProblemFormatError(f"cannot serialize {type(x).__name__}")


def _is_scalar(x):
    return not isinstance(x, (dict, list, tuple, np.ndarray))


def _flat(x):
    # scalars, or a list of scalars / lists of scalars: written on one line
    if _is_scalar(x):
        return True
    if isinstance(x, dict):
        return False
    return all(_is_scalar(v) or (isinstance(v, (list, tuple, np.ndarray)) and all(map(_is_scalar, v))) for v in x)


def _inline(x):
    if _is_scalar(x):
        return _scalar(x)
    return "[" + ", ".join(_inline(v) for v in x) + "]"


def dumps(obj, indent=2, _level=0):
    """JSON text for nested dicts/lists of numbers, strings, bools and None."""
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if _is_scalar(obj):
        return _scalar(obj)
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    obj = list(obj)
    if _flat(obj):
        return _inline(obj)
    items = [pad + dumps(v, indent, _level + 1) for v in obj]
    return "[\n" + ",\n".join(items) + "\n" + end + "]"


def write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dumps(obj) + "\n")


# --------------------------------------------------------- graph <-> dict


def _pose_dict(i, p):
    return {"id": int(i), "R": p.R.tolist(), "t": p.t.tolist()}


def _poses_dict(free, fixed):
    return {
        "free": [_pose_dict(i, p) for i, p in free.items()],
        "fixed": [_pose_dict(i, p) for i, p in fixed.items()],
    }


def _landmarks_dict(points, lines):
    return {
        "points": [{"id": int(j), "position": p.position.tolist()} for j, p in points.items()],
        "lines": [{"id": int(j), "guidance_points": l.guidance_points.tolist()} for j, l in lines.items()],
    }


def problem_to_dict(graph, solver=None, loss=None, selector="both", truth=None):
    K, noise = graph.intrinsics, graph.noise
    solver = solver or SolverOptions()
    loss = loss or RobustLoss()
    d = {
        "schema_version": SCHEMA_VERSION,
        "intrinsics": {
            "fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy, "baseline": K.baseline,
            "width": K.width, "height": K.height,
        },
        "noise": {
            "sigma_p": noise.sigma_p,
            "depth_coeffs": list(noise.depth_coeffs),
            "sigma_line": noise.sigma_line,
        },
        "poses": _poses_dict(graph.free_poses, graph.fixed_poses),
        "landmarks": _landmarks_dict(graph.point_landmarks, graph.line_landmarks),
        "observations": {
            "point": [
                {"keyframe": e.keyframe_id, "landmark": e.landmark_id, "u": e.u, "v": e.v, "d": e.d}
                for e in graph.point_edges
            ],
            "line": [
                {
                    "keyframe": e.keyframe_id, "landmark": e.landmark_id,
                    "p_start": e.p_start.tolist(), "p_end": e.p_end.tolist(), "coeffs": e.coeffs.tolist(),
                }
                for e in graph.line_edges
            ],
        },
        "solver": {
            "selector": str(getattr(selector, "value", selector)),
            "loss": {"delta": loss.delta, "line_delta": loss.line_delta},
            "options": solver.to_dict(),
        },
    }
    if graph.gauge_declared:
        d["gauge_declared"] = True
    if truth is not None:
        d["ground_truth"] = {
            "poses": _poses_dict(truth.free_poses, truth.fixed_poses),
            "landmarks": _landmarks_dict(truth.point_landmarks, truth.line_landmarks),
            "outlier_edges": {k: list(v) for k, v in truth.outlier_edges.items()},
        }
    return d


def _get(d, key, where):
    try:
        return d[key]
    except (KeyError, TypeError):
        raise ProblemFormatError(f"missing field {key!r} in {where}") from None


def _poses_from(d, where):
    out = {}
    for p in d:
        i = int(_get(p, "id", where))
        if i in out:
            raise ProblemFormatError(f"duplicate keyframe id {i} in {where}")
        out[i] = Pose(np.array(_get(p, "R", where), dtype=float), np.array(_get(p, "t", where), dtype=float))
    return out


def _landmarks_from(d, where):
    points = {}
    for p in _get(d, "points", where):
        j = int(_get(p, "id", where))
        points[j] = PointLandmark(j, _get(p, "position", where))
    lines = {}
    for l in _get(d, "lines", where):
        j = int(_get(l, "id", where))
        lines[j] = LineLandmark(j, _get(l, "guidance_points", where))
    return points, lines


def problem_from_dict(d):
    """``(graph, solver options, loss, selector, truth or None)`` from a parsed problem file."""
    if not isinstance(d, dict):
        raise ProblemFormatError("problem file must hold a JSON object")
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ProblemFormatError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    for s in SECTIONS:
        _get(d, s, "problem")
    try:
        k = d["intrinsics"]
        K = CameraIntrinsics(
            float(_get(k, "fx", "intrinsics")), float(_get(k, "fy", "intrinsics")),
            float(_get(k, "cx", "intrinsics")), float(_get(k, "cy", "intrinsics")),
            float(k.get("baseline", 0.08)), k.get("width"), k.get("height"),
        )
        n = d["noise"]
        noise = NoiseModel(
            float(_get(n, "sigma_p", "noise")), tuple(_get(n, "depth_coeffs", "noise")),
            float(_get(n, "sigma_line", "noise")),
        )
        free = _poses_from(_get(d["poses"], "free", "poses"), "poses.free")
        fixed = _poses_from(_get(d["poses"], "fixed", "poses"), "poses.fixed")
        points, lines = _landmarks_from(d["landmarks"], "landmarks")
        obs = d["observations"]
        pe = [
            PointObservation(int(_get(e, "keyframe", "point observation")), int(_get(e, "landmark", "point observation")),
                             float(_get(e, "u", "point observation")), float(_get(e, "v", "point observation")),
                             float(_get(e, "d", "point observation")))
            for e in _get(obs, "point", "observations")
        ]
        le = [
            LineObservation(int(_get(e, "keyframe", "line observation")), int(_get(e, "landmark", "line observation")),
                            _get(e, "p_start", "line observation"), _get(e, "p_end", "line observation"),
                            e.get("coeffs"))
            for e in _get(obs, "line", "observations")
        ]
        graph = FactorGraph(K, noise, free, fixed, points, lines, pe, le, bool(d.get("gauge_declared", False)))
        s = d["solver"]
        options = SolverOptions.from_dict(s.get("options", {}))
        loss_d = s.get("loss", {})
        loss = RobustLoss(float(loss_d.get("delta", 2.45)), float(loss_d.get("line_delta", 1.96)))
        selector = s.get("selector", "both")
        truth = None
        if "ground_truth" in d:
            truth = _truth_from(d["ground_truth"], graph)
    except ProblemFormatError:
        raise
    except (PLBAError, ValueError, TypeError) as exc:
        raise ProblemFormatError(f"invalid problem file: {exc}") from exc
    return graph, options, loss, selector, truth


def _truth_from(gt, graph):
    from .synthetic import GroundTruth

    free = _poses_from(_get(gt["poses"], "free", "ground_truth.poses"), "ground_truth.poses.free")
    fixed = _poses_from(_get(gt["poses"], "fixed", "ground_truth.poses"), "ground_truth.poses.fixed")
    points, lines = _landmarks_from(_get(gt, "landmarks", "ground_truth"), "ground_truth.landmarks")
    # only the state is stored; noiseless measurements are not round-tripped
    truth = GroundTruth(free, fixed, points, lines, [], [])
    outl = gt.get("outlier_edges", {})
    truth.outlier_edges = {"point": list(outl.get("point", [])), "line": list(outl.get("line", []))}
    return truth


def save_problem(path, graph, solver=None, loss=None, selector="both", truth=None):
    write_json(path, problem_to_dict(graph, solver, loss, selector, truth))


def load_problem(path):
    with open(path, encoding="utf-8") as f:
        text = f.read()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProblemFormatError(f"{path}: not valid JSON ({exc})") from exc
    return problem_from_dict(d)
